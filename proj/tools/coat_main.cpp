#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "coat/gradcheck.hpp"
#include "coat/trainer.hpp"

namespace fs = std::filesystem;

namespace {

coat::RunConfig resolve_config(const std::string& config_path, uint64_t* seed_override) {
  coat::RunConfig cfg =
      config_path.empty() ? coat::default_toy_config() : coat::load_config_file(config_path);
  if (seed_override) {
    cfg.seed = *seed_override;
    cfg.bench.rng_seed = *seed_override;
  }
  cfg.validate();
  return cfg;
}

coat::Benchmark resolve_benchmark(const coat::RunConfig& cfg, const std::string& bench_dir) {
  if (!bench_dir.empty()) return coat::load_benchmark(bench_dir);
  return coat::generate(cfg.bench);
}

int cmd_gen_data(const std::string& config_path, uint64_t* seed, const std::string& out) {
  coat::RunConfig cfg = resolve_config(config_path, seed);
  coat::Benchmark bench = coat::generate(cfg.bench);
  coat::save_benchmark(out, bench);
  std::cout << "wrote " << bench.train.size() << " train / " << bench.test.size() << " test scenes, "
            << bench.queries.size() << " queries to " << out << "\n";
  return 0;
}

int cmd_train(const std::string& config_path, uint64_t* seed, const std::string& out,
              const std::string& bench_dir, const std::string& resume) {
  coat::RunConfig cfg = resolve_config(config_path, seed);
  coat::Benchmark bench = resolve_benchmark(cfg, bench_dir);
  fs::create_directories(out);
  coat::save_config_file((fs::path(out) / "config.json").string(), cfg);
  int last_epoch = -1;
  auto hook = [&last_epoch, &cfg](int epoch, int step, const coat::LossReport& report) {
    if (epoch != last_epoch) {
      std::cout << "epoch " << epoch + 1 << "/" << cfg.optim.epochs << "  total=" << report.total_value
                << "\n";
      last_epoch = epoch;
    }
    (void)step;
  };
  coat::TrainOutcome outcome = coat::train_run(cfg, bench, out, resume, hook);
  std::cout << "finished " << outcome.steps << " steps, final loss " << outcome.final_total_loss
            << "\ncheckpoint: " << outcome.checkpoint_path << "\n";
  return 0;
}

int cmd_eval(const std::string& checkpoint, const std::string& bench_dir, std::vector<int> sizes,
             const std::string& out) {
  coat::Checkpoint ckpt = coat::load_checkpoint(checkpoint);
  coat::Benchmark bench =
      bench_dir.empty() ? coat::generate(ckpt.config.bench) : coat::load_benchmark(bench_dir);
  if (sizes.empty()) sizes = ckpt.config.eval_gallery_sizes;
  coat::EvalReport report = coat::evaluate_model(ckpt.model, bench, sizes, ckpt.config.seed);

  fs::create_directories(out);
  {
    std::ofstream js(fs::path(out) / "eval_report.json");
    js << coat::eval_report_json(report) << "\n";
  }
  {
    std::ofstream cs(fs::path(out) / "gallery_curve.csv");
    cs << coat::eval_curve_csv(report);
  }
  coat::write_detections_jsonl((fs::path(out) / "detections.jsonl").string(),
                               coat::detect_all(ckpt.model, bench, ckpt.config.seed));
  std::cout << coat::eval_report_json(report) << "\n";
  return 0;
}

int cmd_gradcheck(const std::string& scope, uint64_t seed) {
  coat::set_precision(coat::Precision::f64);
  bool all_pass = true;
  if (scope == "op" || scope == "block") {
    for (const auto& entry : coat::gradcheck_battery(scope, seed)) {
      std::cout << (entry.report.pass ? "PASS " : "FAIL ") << entry.name
                << "  max_rel_err=" << entry.report.max_rel_err << "\n";
      all_pass = all_pass && entry.report.pass;
    }
  } else if (scope == "full") {
    coat::FullGradcheckResult res = coat::gradcheck_full_loss(seed);
    std::cout << "full 3-stage loss over " << res.n_params << " parameters (seed " << res.seed_used
              << "): " << (res.report.pass ? "PASS" : "FAIL")
              << "  max_rel_err=" << res.report.max_rel_err << "\n";
    if (!res.report.pass) std::cout << coat::format_report(res.report);
    all_pass = res.report.pass;
  } else {
    throw coat::Error("E_CONFIG", "gradcheck scope must be op, block or full");
  }
  return all_pass ? 0 : 1;
}

int cmd_ablate(const std::string& preset, const std::string& config_path, int seeds,
               const std::string& out) {
  coat::RunConfig base = config_path.empty() ? coat::default_toy_config() : coat::load_config_file(config_path);
  if (config_path.empty()) {
    // reduced budget so a sweep of variants stays minutes, not hours
    base.bench.n_train_scenes = 48;
    base.bench.n_test_scenes = 32;
    base.bench.n_identities = 12;
    base.bench.n_unlabeled = 3;
    base.bench.gallery_size = 12;
    base.optim.epochs = 12;
    base.optim.decay_epoch = 8;
  }
  fs::create_directories(out);
  const auto rows = coat::run_ablation(preset, base, seeds, out);
  std::ofstream csv(fs::path(out) / (preset + ".csv"));
  csv << "variant,map,top1,det_ap\n";
  std::cout << "variant,map,top1,det_ap\n";
  for (const auto& r : rows) {
    csv << r.variant << "," << r.map << "," << r.top1 << "," << r.det_ap << "\n";
    std::cout << r.variant << "," << r.map << "," << r.top1 << "," << r.det_ap << "\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"COAT toy person search"};
  app.require_subcommand(1);

  std::string config_path, out_dir, bench_dir, resume, checkpoint, scope = "full", preset;
  uint64_t seed = 0;
  bool seed_set = false;
  int seeds = 1;
  std::vector<int> sizes;

  auto add_seed = [&](CLI::App* cmd) {
    cmd->add_option("--seed", seed, "override the config seed")->each([&](const std::string&) {
      seed_set = true;
    });
  };

  CLI::App* gen = app.add_subcommand("gen-data", "generate the synthetic benchmark");
  gen->add_option("--config", config_path, "config JSON");
  add_seed(gen);
  gen->add_option("--out", out_dir, "output directory")->default_val("bench");

  CLI::App* train = app.add_subcommand("train", "train a model");
  train->add_option("--config", config_path, "config JSON");
  add_seed(train);
  train->add_option("--out", out_dir, "output directory")->default_val("runs/train");
  train->add_option("--bench", bench_dir, "benchmark directory (generated on the fly when omitted)");
  train->add_option("--resume", resume, "checkpoint to resume from");

  CLI::App* eval = app.add_subcommand("eval", "evaluate a checkpoint");
  eval->add_option("--checkpoint", checkpoint, "checkpoint path")->required();
  eval->add_option("--bench", bench_dir, "benchmark directory (regenerated from config when omitted)");
  eval->add_option("--gallery-sizes", sizes, "gallery sweep sizes");
  eval->add_option("--out", out_dir, "output directory")->default_val("runs/eval");

  CLI::App* gc = app.add_subcommand("gradcheck", "finite-difference gradient verification");
  gc->add_option("--scope", scope, "op | block | full")->default_val("full");
  add_seed(gc);

  CLI::App* ablate = app.add_subcommand("ablate", "train and compare preset variants");
  ablate->add_option("--preset", preset, "stages | iou-schedule | attention | scales | reid-at-stage1")
      ->required();
  ablate->add_option("--config", config_path, "budget config JSON");
  ablate->add_option("--seeds", seeds, "number of seeds to average")->default_val(1);
  ablate->add_option("--out", out_dir, "output directory")->default_val("runs/ablate");

  CLI11_PARSE(app, argc, argv);

  try {
    coat::init_precision_from_env();
    uint64_t* seed_ptr = seed_set ? &seed : nullptr;
    if (gen->parsed()) return cmd_gen_data(config_path, seed_ptr, out_dir);
    if (train->parsed()) return cmd_train(config_path, seed_ptr, out_dir, bench_dir, resume);
    if (eval->parsed()) return cmd_eval(checkpoint, bench_dir, sizes, out_dir);
    if (gc->parsed()) return cmd_gradcheck(scope, seed_set ? seed : 0);
    if (ablate->parsed()) return cmd_ablate(preset, config_path, seeds, out_dir);
  } catch (const coat::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: E_INTERNAL: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

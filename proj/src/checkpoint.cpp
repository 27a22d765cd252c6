#include "coat/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include <json.hpp>

namespace coat {

namespace {
constexpr char kMagic[8] = {'C', 'O', 'A', 'T', 'C', 'K', 'P', 'T'};
}

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  std::ofstream out(path, std::ios::binary);
  check(out.good(), "E_IO", "cannot open checkpoint '" + path + "' for writing");

  const auto params = ckpt.model.params();
  check(ckpt.momentum.empty() || ckpt.momentum.size() == params.size(), "E_STATE",
        "momentum buffer count does not match the parameter count");

  nlohmann::json manifest;
  manifest["format_version"] = kCheckpointVersion;
  manifest["epoch"] = ckpt.epoch;
  manifest["config"] = nlohmann::json::parse(render_config(ckpt.config));
  nlohmann::json names = nlohmann::json::array();
  for (const Tensor& p : params) names.push_back(p.name());
  manifest["params"] = names;
  manifest["has_momentum"] = !ckpt.momentum.empty();
  nlohmann::json oim_meta = nlohmann::json::array();
  for (const OimState& s : ckpt.oim) oim_meta.push_back(s.n_labeled() > 0);
  manifest["oim_stages"] = oim_meta;

  const std::string ms = manifest.dump();
  const uint32_t version = kCheckpointVersion;
  const uint64_t mlen = ms.size();
  out.write(kMagic, 8);
  out.write(reinterpret_cast<const char*>(&version), 4);
  out.write(reinterpret_cast<const char*>(&mlen), 8);
  out.write(ms.data(), ms.size());

  for (const Tensor& p : params) write_tensor_blob(out, p, p.name());
  for (size_t i = 0; i < ckpt.momentum.size(); ++i) {
    Tensor buf = make_tensor({static_cast<int64_t>(ckpt.momentum[i].size())},
                             std::vector<double>(ckpt.momentum[i]));
    write_tensor_blob(out, buf, "opt.momentum." + params[i].name());
  }
  for (const OimState& s : ckpt.oim)
    if (s.n_labeled() > 0) s.serialize(out);
  check(out.good(), "E_IO", "checkpoint write failed");
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  check(in.good(), "E_IO", "cannot open checkpoint '" + path + "'");

  char magic[8];
  uint32_t version = 0;
  uint64_t mlen = 0;
  in.read(magic, 8);
  check(in.good() && std::memcmp(magic, kMagic, 8) == 0, "E_FORMAT", "not a checkpoint file");
  in.read(reinterpret_cast<char*>(&version), 4);
  check(version == kCheckpointVersion, "E_VERSION",
        "checkpoint format version " + std::to_string(version) + " is not supported");
  in.read(reinterpret_cast<char*>(&mlen), 8);
  std::string ms(mlen, '\0');
  in.read(ms.data(), mlen);
  check(in.good(), "E_IO", "checkpoint manifest read failed");
  nlohmann::json manifest = nlohmann::json::parse(ms, nullptr, false);
  check(!manifest.is_discarded(), "E_FORMAT", "checkpoint manifest is not valid JSON");

  Checkpoint ckpt;
  ckpt.config = parse_config(manifest.at("config").dump());
  ckpt.epoch = manifest.at("epoch").get<int>();
  ckpt.model = Model(ckpt.config.cascade, ckpt.config.bench.n_identities, ckpt.config.seed);

  auto params = ckpt.model.params();
  const auto names = manifest.at("params").get<std::vector<std::string>>();
  check(names.size() == params.size(), "E_FORMAT", "checkpoint parameter list mismatch");
  for (size_t i = 0; i < params.size(); ++i) {
    NamedTensor nt = read_tensor_blob(in);
    check(nt.name == params[i].name(), "E_FORMAT",
          "checkpoint tensor order mismatch at '" + nt.name + "'");
    check(nt.tensor.shape() == params[i].shape(), "E_FORMAT",
          "checkpoint tensor shape mismatch at '" + nt.name + "'");
    std::copy(nt.tensor.data().begin(), nt.tensor.data().end(), params[i].mutable_data().begin());
  }
  if (manifest.value("has_momentum", false)) {
    for (size_t i = 0; i < params.size(); ++i) {
      NamedTensor nt = read_tensor_blob(in);
      ckpt.momentum.emplace_back(nt.tensor.data().begin(), nt.tensor.data().end());
    }
  }
  for (bool has : manifest.at("oim_stages").get<std::vector<bool>>()) {
    if (has)
      ckpt.oim.push_back(OimState::deserialize(in));
    else
      ckpt.oim.emplace_back();
  }
  return ckpt;
}

}  // namespace coat

#include "coat/gradcheck.hpp"

#include <cmath>
#include <sstream>

namespace coat {

GradcheckReport gradcheck(const std::function<Tensor()>& forward, const std::vector<Tensor>& params,
                          double eps, double tol) {
  check(precision() == Precision::f64, "E_PRECISION", "gradcheck requires 64-bit mode");
  check(eps > 0.0 && tol > 0.0, "E_CONFIG", "gradcheck eps/tol must be positive");

  // analytic pass
  for (Tensor p : params) p.zero_grad();
  {
    Tape tape;
    Tensor loss = forward();
    check(loss.size() == 1, "E_SHAPE", "gradcheck loss must be scalar");
    tape.backward(loss);
  }
  std::vector<std::vector<double>> analytic;
  analytic.reserve(params.size());
  for (const Tensor& p : params) {
    if (p.has_grad()) {
      analytic.emplace_back(p.grad().begin(), p.grad().end());
    } else {
      analytic.emplace_back(p.size(), 0.0);
    }
  }

  GradcheckReport report;
  report.eps = eps;
  report.tol = tol;
  for (size_t pi = 0; pi < params.size(); ++pi) {
    Tensor p = params[pi];
    GradcheckEntry entry;
    entry.param = p.name().empty() ? "param" + std::to_string(pi) : p.name();
    auto values = p.mutable_data();
    for (int64_t i = 0; i < p.size(); ++i) {
      const double orig = values[i];
      values[i] = orig + eps;
      const double up = forward().item();
      values[i] = orig - eps;
      const double down = forward().item();
      values[i] = orig;
      const double numeric = (up - down) / (2.0 * eps);
      const double rel = std::abs(analytic[pi][i] - numeric) / std::max(1.0, std::abs(numeric));
      if (rel > entry.max_rel_err) {
        entry.max_rel_err = rel;
        entry.worst_index = i;
      }
    }
    entry.pass = entry.max_rel_err < tol;
    report.max_rel_err = std::max(report.max_rel_err, entry.max_rel_err);
    report.pass = report.pass && entry.pass;
    report.entries.push_back(std::move(entry));
  }
  return report;
}

std::string format_report(const GradcheckReport& report) {
  std::ostringstream os;
  os << "gradcheck eps=" << report.eps << " tol=" << report.tol << "\n";
  for (const auto& e : report.entries) {
    os << (e.pass ? "  ok   " : "  FAIL ") << e.param << "  max_rel_err=" << e.max_rel_err;
    if (!e.pass) os << "  (element " << e.worst_index << ")";
    os << "\n";
  }
  os << (report.pass ? "PASS" : "FAIL") << "  max_rel_err=" << report.max_rel_err << "\n";
  return os.str();
}

}  // namespace coat

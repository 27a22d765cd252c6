#include "coat/losses.hpp"

#include <cmath>
#include <istream>
#include <ostream>

#include "coat/toybench.hpp"

namespace coat {

namespace {

void normalize_row(double* row, int64_t d) {
  double n = 0.0;
  for (int64_t i = 0; i < d; ++i) n += row[i] * row[i];
  n = std::sqrt(n);
  if (n < 1e-12) n = 1e-12;
  for (int64_t i = 0; i < d; ++i) row[i] /= n;
}

}  // namespace

OimState::OimState(int64_t n_labeled, int64_t embed_dim, const OimConfig& cfg, Rng& rng) : cfg_(cfg) {
  check(n_labeled >= 1 && embed_dim >= 1, "E_CONFIG", "OIM needs at least one labeled identity");
  check(cfg.cq_capacity >= 0, "E_CONFIG", "negative circular queue capacity");
  check(cfg.tau > 0.0, "E_CONFIG", "OIM temperature must be positive");
  check(cfg.momentum >= 0.0 && cfg.momentum <= 1.0, "E_CONFIG", "OIM momentum must be in [0,1]");
  lut_ = Tensor::randn({n_labeled, embed_dim}, rng, 1.0);
  auto data = lut_.mutable_data();
  for (int64_t r = 0; r < n_labeled; ++r) normalize_row(data.data() + r * embed_dim, embed_dim);
  lut_.apply_precision();
  cq_ = Tensor::zeros({cfg.cq_capacity, embed_dim});
}

Tensor OimState::loss(const Tensor& embeddings, const std::vector<int>& identities) const {
  const int64_t D = lut_.dim(1);
  check(embeddings.ndim() == 2 && embeddings.dim(1) == D, "E_SHAPE", "OIM embedding width mismatch");
  check(embeddings.dim(0) == static_cast<int64_t>(identities.size()), "E_SHAPE",
        "OIM identity count mismatch");

  std::vector<int64_t> rows;
  std::vector<int64_t> targets;
  for (size_t i = 0; i < identities.size(); ++i) {
    if (identities[i] == kUnlabeledId) continue;
    check(identities[i] >= 0 && identities[i] < n_labeled(), "E_RANGE",
          "labeled id " + std::to_string(identities[i]) + " outside the LUT");
    rows.push_back(static_cast<int64_t>(i));
    targets.push_back(identities[i]);
  }
  if (rows.empty()) return Tensor();

  // reference table [L+q, D]: LUT rows then the filled part of the queue
  const int64_t L = n_labeled();
  const int64_t Q = cq_count_;
  std::vector<double> table((L + Q) * D);
  std::copy(lut_.data().begin(), lut_.data().end(), table.begin());
  const auto queue = cq_rows();
  for (int64_t q = 0; q < Q; ++q)
    std::copy(queue[q].begin(), queue[q].end(), table.begin() + (L + q) * D);
  Tensor table_t = make_tensor({L + Q, D}, std::move(table));

  Tensor selected = index_select0(embeddings, rows);
  Tensor logits = scale(matmul(selected, transpose_last2(table_t)), 1.0 / cfg_.tau);
  return softmax_cross_entropy_mean(logits, targets);
}

void OimState::update(const Tensor& embeddings, const std::vector<int>& identities) {
  const int64_t D = lut_.dim(1);
  check(embeddings.size() == 0 || (embeddings.ndim() == 2 && embeddings.dim(1) == D), "E_SHAPE",
        "OIM embedding width mismatch");
  auto lut = lut_.mutable_data();
  auto cq = cq_.mutable_data();
  const double g = cfg_.momentum;
  for (size_t i = 0; i < identities.size(); ++i) {
    const double* e = embeddings.data().data() + static_cast<int64_t>(i) * D;
    if (identities[i] == kUnlabeledId) {
      if (cfg_.cq_capacity == 0) continue;
      double* row = cq.data() + cq_cursor_ * D;
      std::copy(e, e + D, row);
      normalize_row(row, D);
      cq_cursor_ = (cq_cursor_ + 1) % cfg_.cq_capacity;
      cq_count_ = std::min(cq_count_ + 1, cfg_.cq_capacity);
    } else {
      check(identities[i] >= 0 && identities[i] < n_labeled(), "E_RANGE", "labeled id outside the LUT");
      double* row = lut.data() + identities[i] * D;
      for (int64_t d = 0; d < D; ++d) row[d] = g * row[d] + (1.0 - g) * e[d];
      normalize_row(row, D);
    }
  }
  lut_.apply_precision();
  cq_.apply_precision();
}

std::vector<std::vector<double>> OimState::cq_rows() const {
  const int64_t D = cq_count_ > 0 ? cq_.dim(1) : 0;
  std::vector<std::vector<double>> rows;
  rows.reserve(cq_count_);
  // oldest first: the cursor points at the next overwrite target
  const int64_t start = cq_count_ == cfg_.cq_capacity ? cq_cursor_ : 0;
  for (int64_t i = 0; i < cq_count_; ++i) {
    const int64_t r = (start + i) % cfg_.cq_capacity;
    const double* p = cq_.data().data() + r * D;
    rows.emplace_back(p, p + D);
  }
  return rows;
}

void OimState::serialize(std::ostream& out) const {
  write_tensor_blob(out, lut_, "oim.lut");
  write_tensor_blob(out, cq_, "oim.cq");
  const int64_t meta[4] = {cq_count_, cq_cursor_, cfg_.cq_capacity, 0};
  out.write(reinterpret_cast<const char*>(meta), sizeof(meta));
  out.write(reinterpret_cast<const char*>(&cfg_.tau), sizeof(double));
  out.write(reinterpret_cast<const char*>(&cfg_.momentum), sizeof(double));
  check(out.good(), "E_IO", "OIM state write failed");
}

OimState OimState::deserialize(std::istream& in) {
  OimState s;
  s.lut_ = read_tensor_blob(in).tensor;
  s.cq_ = read_tensor_blob(in).tensor;
  int64_t meta[4];
  in.read(reinterpret_cast<char*>(meta), sizeof(meta));
  in.read(reinterpret_cast<char*>(&s.cfg_.tau), sizeof(double));
  in.read(reinterpret_cast<char*>(&s.cfg_.momentum), sizeof(double));
  check(in.good(), "E_IO", "OIM state read failed");
  s.cq_count_ = meta[0];
  s.cq_cursor_ = meta[1];
  s.cfg_.cq_capacity = meta[2];
  return s;
}

Tensor smooth_l1(const Tensor& pred, const Tensor& target) {
  if (!pred.defined() || pred.size() == 0) return Tensor();
  return smooth_l1_mean(pred, target);
}

Tensor det_cls_loss(const Tensor& logits, const std::vector<int64_t>& labels) {
  check(logits.ndim() == 2 && logits.dim(1) == 2, "E_SHAPE", "detection classifier emits 2 logits");
  return softmax_cross_entropy_mean(logits, labels);
}

Tensor id_loss(const Tensor& embeddings, const std::vector<int>& identities, const Tensor& cls_w,
               const Tensor& cls_b) {
  std::vector<int64_t> rows;
  std::vector<int64_t> targets;
  const int64_t vocab = cls_w.dim(1);
  for (size_t i = 0; i < identities.size(); ++i) {
    if (identities[i] == kUnlabeledId) continue;
    check(identities[i] >= 0 && identities[i] < vocab, "E_RANGE", "identity outside the classifier vocabulary");
    rows.push_back(static_cast<int64_t>(i));
    targets.push_back(identities[i]);
  }
  if (rows.empty()) return Tensor();
  Tensor logits = linear(index_select0(embeddings, rows), cls_w, cls_b);
  return softmax_cross_entropy_mean(logits, targets);
}

LossReport total_loss(const std::vector<StageLossTerms>& stages, double lambda_oim, double lambda_id) {
  check(!stages.empty(), "E_CONFIG", "total_loss needs at least one stage");
  LossReport report;
  Tensor total;
  auto append = [&total](const Tensor& term, double factor) {
    if (!term.defined()) return;
    Tensor scaled = factor == 1.0 ? term : scale(term, factor);
    total = total.defined() ? add(total, scaled) : scaled;
  };
  for (const StageLossTerms& st : stages) {
    LossReport::StageValues v;
    v.has_reid = st.has_reid;
    if (st.det_cls.defined()) v.det_cls = st.det_cls.item();
    if (st.det_reg.defined()) v.det_reg = st.det_reg.item();
    append(st.det_cls, 1.0);
    append(st.det_reg, 1.0);
    if (st.has_reid) {
      if (st.oim.defined()) v.oim = st.oim.item();
      if (st.id.defined()) v.id = st.id.item();
      append(st.oim, lambda_oim);
      append(st.id, lambda_id);
    }
    report.stages.push_back(v);
  }
  check(total.defined(), "E_STATE", "no loss terms were produced");
  report.total = total;
  report.total_value = total.item();
  return report;
}

}  // namespace coat

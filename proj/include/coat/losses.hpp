#pragma once

#include <iosfwd>
#include <vector>

#include "coat/rng.hpp"
#include "coat/tensor.hpp"

namespace coat {

struct OimConfig {
  double tau = 1.0 / 30.0;
  double momentum = 0.5;  // gamma; 1 freezes the table
  int64_t cq_capacity = 64;
};

// Online instance matching memory: a lookup table of labeled identity
// embeddings plus a FIFO circular queue of unlabeled ones. Rows are unit-norm;
// the storage never receives gradients and is refreshed once per training
// step, after the backward pass.
class OimState {
 public:
  OimState() = default;
  OimState(int64_t n_labeled, int64_t embed_dim, const OimConfig& cfg, Rng& rng);

  // mean CE over the labeled rows of `embeddings` ([F,D], unit-norm) against
  // cosine logits to [LUT;CQ] at temperature tau. identities uses
  // kUnlabeledId (-1) for unlabeled foreground; those rows contribute no
  // loss. Undefined tensor when no labeled row exists.
  Tensor loss(const Tensor& embeddings, const std::vector<int>& identities) const;

  // labeled -> momentum-merged into its LUT row (renormalized); unlabeled ->
  // pushed to the queue with FIFO eviction.
  void update(const Tensor& embeddings, const std::vector<int>& identities);

  const Tensor& lut() const { return lut_; }
  const Tensor& cq_storage() const { return cq_; }
  int64_t cq_count() const { return cq_count_; }
  int64_t cq_cursor() const { return cq_cursor_; }
  int64_t n_labeled() const { return lut_.defined() ? lut_.dim(0) : 0; }
  const OimConfig& config() const { return cfg_; }

  // oldest-first queue contents
  std::vector<std::vector<double>> cq_rows() const;

  void serialize(std::ostream& out) const;
  static OimState deserialize(std::istream& in);

 private:
  OimConfig cfg_;
  Tensor lut_;  // [L,D]
  Tensor cq_;   // [capacity,D]
  int64_t cq_count_ = 0;
  int64_t cq_cursor_ = 0;
};

// mean smooth-L1 between encoded regression targets; undefined when empty
Tensor smooth_l1(const Tensor& pred, const Tensor& target);

// 2-way softmax CE over person/background logits
Tensor det_cls_loss(const Tensor& logits, const std::vector<int64_t>& labels);

// CE over the labeled-identity vocabulary through a learned linear classifier
Tensor id_loss(const Tensor& embeddings, const std::vector<int>& identities, const Tensor& cls_w,
               const Tensor& cls_b);

// per-stage pieces of the training objective; undefined tensors count as 0
struct StageLossTerms {
  Tensor det_cls;
  Tensor det_reg;
  Tensor oim;
  Tensor id;
  bool has_reid = false;
};

struct LossReport {
  struct StageValues {
    double det_cls = 0.0, det_reg = 0.0, oim = 0.0, id = 0.0;
    bool has_reid = false;
  };
  std::vector<StageValues> stages;
  double total_value = 0.0;
  Tensor total;  // taped scalar
};

// total = sum_t det_cls + det_reg + [stage has reid](lambda_oim*oim + lambda_id*id)
LossReport total_loss(const std::vector<StageLossTerms>& stages, double lambda_oim, double lambda_id);

}  // namespace coat

#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "fine/image.hpp"
#include "fine/optim.hpp"
#include "fine/task.hpp"
#include "fine/tensor.hpp"

namespace fine {

enum class BackboneKind { mlp, nice };

std::string backbone_name(BackboneKind kind);
BackboneKind parse_backbone(const std::string& name);

struct ModelConfig {
  std::size_t image_side = 16;
  std::size_t embed_dim = 32;
  // Basis entries per memory. 0 selects the query-as-weights ablation: each
  // layer uses its query matrix directly and no memory exists.
  std::size_t memory_count = 16;
  BackboneKind backbone = BackboneKind::nice;
  std::size_t layer_count = 4;
  std::uint64_t seed = 0;

  bool operator==(const ModelConfig&) const = default;
};

struct LayerDims {
  std::size_t d_in = 0;
  std::size_t d_out = 0;
  std::size_t memory_index = 0;
};

// For nice, coupling t reads and writes halves of size d/2 and layers 2t and
// 2t+1 share memory t. For mlp every layer is d x d with its own memory.
struct BackboneSpec {
  BackboneKind kind = BackboneKind::nice;
  std::vector<LayerDims> layers;
  std::size_t memory_banks = 0;
};

BackboneSpec make_backbone_spec(BackboneKind kind, std::size_t layer_count, std::size_t embed_dim);

// Basis weight matrices of one memory, each d_out x d_in.
struct FunctionalMemory {
  std::size_t d_in = 0;
  std::size_t d_out = 0;
  std::vector<Tensor> keys;
  std::vector<Tensor> values;

  std::size_t size() const { return keys.size(); }
};

// Keys and values stacked as [s, d_out * d_in]; built once per forward batch.
struct MemoryBanks {
  std::size_t d_in = 0;
  std::size_t d_out = 0;
  Tensor keys;
  Tensor values;

  static MemoryBanks stack(const FunctionalMemory& memory);
  std::size_t size() const { return keys.size(0); }
};

// a[i] = <flatten(values[i]), flatten(query)> / sqrt(d_in d_out). No softmax.
Tensor analogy_weights(const Tensor& query, const MemoryBanks& banks);

// W = reshape(sum_i a[i] flatten(keys[i])) as d_out x d_in.
Tensor compose_weight(const Tensor& coefficients, const MemoryBanks& banks);

// Additive couplings (u1, u2) -> (u1, u2 + W tanh(u1)); even layers condition
// on the first half, odd layers on the second.
Tensor nice_forward(const Tensor& v, std::span<const Tensor> weights);
Tensor nice_inverse(const Tensor& v, std::span<const Tensor> weights);

// W_0 ... W_{L-1} with tanh between layers.
Tensor mlp_forward(const Tensor& v, std::span<const Tensor> weights);

// eta_i = sum_k alpha_k (c_ik - y*_k)^2; returns log p_i = log softmax(-eta).
Tensor choice_log_probabilities(const Tensor& y_star, std::span<const Tensor> choices, const Tensor& alpha);
Tensor choice_probabilities(const Tensor& y_star, std::span<const Tensor> choices, const Tensor& alpha);

struct Affine {
  Tensor weight;  // [out, in]
  Tensor bias;    // [out]

  Tensor apply(const Tensor& v) const;  // v: [in] or [N, in]
};

struct Encoder {
  std::vector<Tensor> conv_weights;
  std::vector<Tensor> conv_biases;
  Affine fc;

  // images: [N, 1, H, W] -> [N, d]
  Tensor forward(const Tensor& images) const;
};

struct ComposedBackbone {
  std::vector<Tensor> weights;  // one per layer, d_out x d_in
  Tensor output;                // backbone applied to the hint input
};

struct TaskForward {
  Tensor log_probs;  // [4]
  ComposedBackbone composed;
  Tensor y_star;
};

struct TaskSolution {
  std::vector<double> probabilities;
  std::size_t predicted_index = 0;
  std::vector<double> phi;
};

class ModelConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class FineModel {
 public:
  explicit FineModel(const ModelConfig& cfg);

  const ModelConfig& config() const { return cfg_; }
  const BackboneSpec& backbone() const { return spec_; }
  std::size_t embed_dim() const { return cfg_.embed_dim; }
  bool query_as_weights() const { return cfg_.memory_count == 0; }

  // Every trainable tensor under a unique name, in a fixed order.
  std::vector<NamedTensor> parameters() const;

  Tensor images_tensor(std::span<const Image* const> images) const;
  Tensor encode(const Image& img) const;                             // [d]
  Tensor encode_batch(std::span<const Image* const> images) const;  // [N, d]

  std::vector<MemoryBanks> memory_banks() const;
  ComposedBackbone compose_function(const Tensor& x_emb, const Tensor& y_emb) const;
  ComposedBackbone compose_function(const Tensor& x_emb, const Tensor& y_emb,
                                    std::span<const MemoryBanks> banks) const;
  Tensor apply_backbone(const Tensor& v, std::span<const Tensor> weights) const;

  Tensor alpha() const;  // softplus(alpha_raw)

  // Full forward pass for several tasks; encodes all images in one batch.
  std::vector<TaskForward> forward(std::span<const IQTask* const> tasks) const;
  TaskSolution solve_task(const IQTask& task) const;

  std::size_t phi_length() const;

  const Encoder& encoder() const { return encoder_; }
  const std::vector<Affine>& gammas() const { return gammas_; }
  const std::vector<FunctionalMemory>& memories() const { return memories_; }
  const Tensor& alpha_raw() const { return alpha_raw_; }

 private:
  ModelConfig cfg_;
  BackboneSpec spec_;
  Encoder encoder_;
  std::vector<Affine> gammas_;
  std::vector<FunctionalMemory> memories_;
  Tensor alpha_raw_;
};

std::vector<double> flatten_phi(const ComposedBackbone& composed);
std::size_t argmax_lowest(std::span<const double> v);

// Cross-entropy -log p[answer] from log probabilities.
Tensor choice_loss(const Tensor& log_probs, std::size_t answer_index);

}  // namespace fine

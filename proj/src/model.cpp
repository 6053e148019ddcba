#include "fine/model.hpp"

#include <cmath>

#include "fine/pinv.hpp"
#include "fine/rng.hpp"

namespace fine {

namespace {

constexpr std::size_t kConvChannels[3] = {8, 16, 32};

std::size_t conv_out(std::size_t side) { return (side + 2 - 3) / 2 + 1; }

Tensor uniform_param(Shape shape, std::size_t fan_in, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = rng.uniform(-bound, bound);
  return Tensor::from(std::move(shape), std::move(v), true);
}

Tensor normal_param(Shape shape, double stddev, Rng& rng) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = rng.normal(0.0, stddev);
  return Tensor::from(std::move(shape), std::move(v), true);
}

std::pair<Tensor, Tensor> halves(const Tensor& v) {
  if (v.dim() != 1 || v.size(0) % 2 != 0) {
    throw ShapeError("nice: expects an even-length vector, got " + shape_str(v.shape()));
  }
  const std::size_t h = v.size(0) / 2;
  return {split(v, 0, h), split(v, h, h)};
}

Tensor join(const Tensor& a, const Tensor& b) {
  const Tensor parts[2] = {a, b};
  return concat(parts);
}

// One coupling in either direction; sign = +1 forward, -1 inverse.
Tensor coupling(const Tensor& v, const Tensor& w, std::size_t layer, double sign) {
  auto [first, second] = halves(v);
  const bool even = layer % 2 == 0;
  const Tensor& cond = even ? first : second;
  const Tensor& moved = even ? second : first;
  Tensor shift = matmul(w, tanh(cond));
  Tensor out = sign > 0 ? add(moved, shift) : sub(moved, shift);
  return even ? join(first, out) : join(out, second);
}

}  // namespace

std::string backbone_name(BackboneKind kind) { return kind == BackboneKind::nice ? "nice" : "mlp"; }

BackboneKind parse_backbone(const std::string& name) {
  if (name == "nice") return BackboneKind::nice;
  if (name == "mlp") return BackboneKind::mlp;
  throw ModelConfigError("unknown backbone '" + name + "' (expected mlp or nice)");
}

BackboneSpec make_backbone_spec(BackboneKind kind, std::size_t layer_count, std::size_t d) {
  if (layer_count == 0) throw ModelConfigError("backbone needs at least one layer");
  if (d == 0) throw ModelConfigError("embedding dimension must be positive");
  BackboneSpec spec;
  spec.kind = kind;
  if (kind == BackboneKind::nice) {
    if (layer_count % 2 != 0) throw ModelConfigError("nice backbone needs an even layer count");
    if (d % 2 != 0) throw ModelConfigError("nice backbone needs an even embedding dimension");
    for (std::size_t t = 0; t < layer_count; ++t) spec.layers.push_back({d / 2, d / 2, t / 2});
    spec.memory_banks = layer_count / 2;
  } else {
    for (std::size_t t = 0; t < layer_count; ++t) spec.layers.push_back({d, d, t});
    spec.memory_banks = layer_count;
  }
  return spec;
}

MemoryBanks MemoryBanks::stack(const FunctionalMemory& m) {
  if (m.keys.empty() || m.keys.size() != m.values.size()) {
    throw ShapeError("memory: key and value banks must be non-empty and equally sized");
  }
  const std::size_t n = m.d_in * m.d_out;
  std::vector<Tensor> keys, values;
  for (std::size_t i = 0; i < m.keys.size(); ++i) {
    if (m.keys[i].shape() != Shape{m.d_out, m.d_in} || m.values[i].shape() != Shape{m.d_out, m.d_in}) {
      throw ShapeError("memory: entry " + std::to_string(i) + " is not " + shape_str({m.d_out, m.d_in}));
    }
    keys.push_back(reshape(m.keys[i], {1, n}));
    values.push_back(reshape(m.values[i], {1, n}));
  }
  return {m.d_in, m.d_out, concat(keys), concat(values)};
}

Tensor analogy_weights(const Tensor& query, const MemoryBanks& banks) {
  if (query.shape() != Shape{banks.d_out, banks.d_in}) {
    throw ShapeError("analogy_weights: query " + shape_str(query.shape()) + " does not match memory entries " +
                     shape_str({banks.d_out, banks.d_in}));
  }
  const double norm = std::sqrt(static_cast<double>(banks.d_in * banks.d_out));
  return scalar_mul(matmul(banks.values, flatten(query)), 1.0 / norm);
}

Tensor compose_weight(const Tensor& a, const MemoryBanks& banks) {
  if (a.shape() != Shape{banks.size()}) {
    throw ShapeError("compose_weight: coefficients " + shape_str(a.shape()) + " do not match " +
                     std::to_string(banks.size()) + " memory entries");
  }
  return reshape(matmul(transpose(banks.keys), a), {banks.d_out, banks.d_in});
}

Tensor nice_forward(const Tensor& v, std::span<const Tensor> weights) {
  Tensor out = v;
  for (std::size_t t = 0; t < weights.size(); ++t) out = coupling(out, weights[t], t, +1.0);
  return out;
}

Tensor nice_inverse(const Tensor& v, std::span<const Tensor> weights) {
  Tensor out = v;
  for (std::size_t t = weights.size(); t-- > 0;) out = coupling(out, weights[t], t, -1.0);
  return out;
}

Tensor mlp_forward(const Tensor& v, std::span<const Tensor> weights) {
  Tensor out = v;
  for (std::size_t t = 0; t < weights.size(); ++t) {
    out = matmul(weights[t], out);
    if (t + 1 < weights.size()) out = tanh(out);
  }
  return out;
}

Tensor choice_log_probabilities(const Tensor& y_star, std::span<const Tensor> choices, const Tensor& alpha) {
  std::vector<Tensor> neg_eta;
  for (const auto& c : choices) {
    if (c.shape() != y_star.shape() || alpha.shape() != y_star.shape()) {
      throw ShapeError("choice_probabilities: embedding shapes differ");
    }
    Tensor diff = sub(c, y_star);
    neg_eta.push_back(negate(dot(alpha, mul(diff, diff))));
  }
  return log_softmax(concat(neg_eta));
}

Tensor choice_probabilities(const Tensor& y_star, std::span<const Tensor> choices, const Tensor& alpha) {
  return exp(choice_log_probabilities(y_star, choices, alpha));
}

Tensor choice_loss(const Tensor& log_probs, std::size_t answer_index) {
  return negate(split(log_probs, answer_index, 1));
}

Tensor Affine::apply(const Tensor& v) const {
  if (v.dim() == 1) return add(matmul(weight, v), bias);
  return add(matmul(v, transpose(weight)), bias);
}

Tensor Encoder::forward(const Tensor& images) const {
  Tensor h = images;
  for (std::size_t k = 0; k < conv_weights.size(); ++k) {
    h = relu(conv2d(h, conv_weights[k], conv_biases[k], 2, 1));
  }
  const std::size_t n = h.size(0);
  return fc.apply(reshape(h, {n, h.numel() / n}));
}

FineModel::FineModel(const ModelConfig& cfg) : cfg_(cfg) {
  if (cfg.image_side < kMinImageSide) throw ModelConfigError("image_side below the minimum of 8");
  spec_ = make_backbone_spec(cfg.backbone, cfg.layer_count, cfg.embed_dim);
  Rng rng(hash64(cfg.seed, 0x6d6f64656cULL));

  std::size_t in_ch = 1, side = cfg.image_side;
  for (std::size_t ch : kConvChannels) {
    const std::size_t fan_in = in_ch * 9;
    encoder_.conv_weights.push_back(uniform_param({ch, in_ch, 3, 3}, fan_in, rng));
    encoder_.conv_biases.push_back(uniform_param({ch}, fan_in, rng));
    in_ch = ch;
    side = conv_out(side);
  }
  const std::size_t flat = in_ch * side * side;
  encoder_.fc = {uniform_param({cfg.embed_dim, flat}, flat, rng), uniform_param({cfg.embed_dim}, flat, rng)};

  for (const auto& layer : spec_.layers) {
    gammas_.push_back({uniform_param({layer.d_out, cfg.embed_dim}, cfg.embed_dim, rng),
                       uniform_param({layer.d_out}, cfg.embed_dim, rng)});
  }
  if (cfg.memory_count > 0) {
    for (std::size_t m = 0; m < spec_.memory_banks; ++m) {
      const LayerDims* dims = nullptr;
      for (const auto& l : spec_.layers) {
        if (l.memory_index == m) {
          dims = &l;
          break;
        }
      }
      FunctionalMemory mem{dims->d_in, dims->d_out, {}, {}};
      const double stddev = 1.0 / std::sqrt(static_cast<double>(dims->d_in * dims->d_out));
      for (std::size_t i = 0; i < cfg.memory_count; ++i) {
        mem.keys.push_back(normal_param({dims->d_out, dims->d_in}, stddev, rng));
        mem.values.push_back(normal_param({dims->d_out, dims->d_in}, stddev, rng));
      }
      memories_.push_back(std::move(mem));
    }
  }
  // softplus(raw) = 1
  alpha_raw_ = Tensor::full({cfg.embed_dim}, std::log(std::expm1(1.0)), true);
}

std::vector<NamedTensor> FineModel::parameters() const {
  std::vector<NamedTensor> out;
  for (std::size_t k = 0; k < encoder_.conv_weights.size(); ++k) {
    const std::string p = "encoder.conv" + std::to_string(k + 1);
    out.push_back({p + ".weight", encoder_.conv_weights[k]});
    out.push_back({p + ".bias", encoder_.conv_biases[k]});
  }
  out.push_back({"encoder.fc.weight", encoder_.fc.weight});
  out.push_back({"encoder.fc.bias", encoder_.fc.bias});
  for (std::size_t t = 0; t < gammas_.size(); ++t) {
    out.push_back({"gamma." + std::to_string(t) + ".weight", gammas_[t].weight});
    out.push_back({"gamma." + std::to_string(t) + ".bias", gammas_[t].bias});
  }
  for (std::size_t m = 0; m < memories_.size(); ++m) {
    const std::string p = "memory." + std::to_string(m);
    for (std::size_t i = 0; i < memories_[m].size(); ++i) {
      out.push_back({p + ".key." + std::to_string(i), memories_[m].keys[i]});
    }
    for (std::size_t i = 0; i < memories_[m].size(); ++i) {
      out.push_back({p + ".value." + std::to_string(i), memories_[m].values[i]});
    }
  }
  out.push_back({"head.alpha_raw", alpha_raw_});
  return out;
}

Tensor FineModel::images_tensor(std::span<const Image* const> images) const {
  const std::size_t side = cfg_.image_side;
  std::vector<double> buf;
  buf.reserve(images.size() * side * side);
  for (const Image* img : images) {
    if (img->side != side) {
      throw ShapeError("encode: image side " + std::to_string(img->side) + " does not match the model's " +
                       std::to_string(side));
    }
    validate_image(*img);
    buf.insert(buf.end(), img->pixels.begin(), img->pixels.end());
  }
  return Tensor::from({images.size(), 1, side, side}, std::move(buf));
}

Tensor FineModel::encode_batch(std::span<const Image* const> images) const {
  return encoder_.forward(images_tensor(images));
}

Tensor FineModel::encode(const Image& img) const {
  const Image* one[1] = {&img};
  return row(encode_batch(one), 0);
}

std::vector<MemoryBanks> FineModel::memory_banks() const {
  std::vector<MemoryBanks> banks;
  for (const auto& m : memories_) banks.push_back(MemoryBanks::stack(m));
  return banks;
}

ComposedBackbone FineModel::compose_function(const Tensor& x_emb, const Tensor& y_emb) const {
  const auto banks = memory_banks();
  return compose_function(x_emb, y_emb, banks);
}

ComposedBackbone FineModel::compose_function(const Tensor& x_emb, const Tensor& y_emb,
                                             std::span<const MemoryBanks> banks) const {
  if (x_emb.shape() != Shape{cfg_.embed_dim} || y_emb.shape() != Shape{cfg_.embed_dim}) {
    throw ShapeError("compose_function: embeddings must be [" + std::to_string(cfg_.embed_dim) + "]");
  }
  ComposedBackbone out;
  Tensor v = x_emb;
  for (std::size_t t = 0; t < spec_.layers.size(); ++t) {
    const LayerDims& dims = spec_.layers[t];
    const Tensor target = gammas_[t].apply(y_emb);
    Tensor input;
    if (spec_.kind == BackboneKind::nice) {
      auto [first, second] = halves(v);
      input = t % 2 == 0 ? first : second;
    } else {
      input = v;
    }
    const Tensor query = build_query(input, target);
    Tensor w = query;
    if (!query_as_weights()) {
      const MemoryBanks& bank = banks[dims.memory_index];
      w = compose_weight(analogy_weights(query, bank), bank);
    }
    out.weights.push_back(w);
    if (spec_.kind == BackboneKind::nice) {
      v = coupling(v, w, t, +1.0);
    } else {
      v = matmul(w, v);
      if (t + 1 < spec_.layers.size()) v = tanh(v);
    }
  }
  out.output = v;
  return out;
}

Tensor FineModel::apply_backbone(const Tensor& v, std::span<const Tensor> weights) const {
  return spec_.kind == BackboneKind::nice ? nice_forward(v, weights) : mlp_forward(v, weights);
}

Tensor FineModel::alpha() const { return softplus(alpha_raw_); }

std::vector<TaskForward> FineModel::forward(std::span<const IQTask* const> tasks) const {
  std::vector<const Image*> images;
  images.reserve(tasks.size() * 7);
  for (const IQTask* t : tasks) {
    images.push_back(&t->x);
    images.push_back(&t->y);
    images.push_back(&t->x_prime);
    for (const auto& c : t->choices) images.push_back(&c);
  }
  const Tensor emb = encode_batch(images);
  const auto banks = memory_banks();
  const Tensor a = alpha();

  std::vector<TaskForward> out;
  out.reserve(tasks.size());
  for (std::size_t i = 0; i < tasks.size(); ++i) {
    const std::size_t base = i * 7;
    TaskForward f;
    f.composed = compose_function(row(emb, base), row(emb, base + 1), banks);
    f.y_star = apply_backbone(row(emb, base + 2), f.composed.weights);
    std::vector<Tensor> choices;
    for (std::size_t c = 0; c < 4; ++c) choices.push_back(row(emb, base + 3 + c));
    f.log_probs = choice_log_probabilities(f.y_star, choices, a);
    out.push_back(std::move(f));
  }
  return out;
}

TaskSolution FineModel::solve_task(const IQTask& task) const {
  NoGradGuard no_grad;
  const IQTask* one[1] = {&task};
  const auto f = forward(one);
  TaskSolution s;
  for (double lp : f[0].log_probs.data()) s.probabilities.push_back(std::exp(lp));
  s.predicted_index = argmax_lowest(s.probabilities);
  s.phi = flatten_phi(f[0].composed);
  return s;
}

std::size_t FineModel::phi_length() const {
  std::size_t n = 0;
  for (const auto& l : spec_.layers) n += l.d_in * l.d_out;
  return n;
}

std::vector<double> flatten_phi(const ComposedBackbone& composed) {
  std::vector<double> phi;
  for (const auto& w : composed.weights) phi.insert(phi.end(), w.data().begin(), w.data().end());
  return phi;
}

std::size_t argmax_lowest(std::span<const double> v) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i) {
    if (v[i] > v[best]) best = i;
  }
  return best;
}

}  // namespace fine

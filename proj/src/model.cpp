#include "xmreid/model.hpp"

#include "xmreid/errors.hpp"
#include "xmreid/losses.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

namespace xmreid {

namespace {

Tensor gaussian_param(Rng& rng, Shape shape, double sd) {
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = sd * normal(rng);
  return Tensor(std::move(shape), std::move(v), true);
}

Tensor filled(Shape shape, double value, bool requires_grad) {
  return Tensor(shape, std::vector<double>(numel(shape), value), requires_grad);
}

// He-normal 3x3 (or 1x1) convolution without bias; batch norm follows.
Conv2d make_conv(Rng& rng, std::size_t in, std::size_t out, std::size_t k, std::size_t stride) {
  const double sd = std::sqrt(2.0 / static_cast<double>(in * k * k));
  return Conv2d{gaussian_param(rng, {out, in, k, k}, sd), stride, k / 2};
}

BatchNorm make_bn(std::size_t channels) {
  return BatchNorm{filled({channels}, 1.0, true), filled({channels}, 0.0, true),
                   filled({channels}, 0.0, false), filled({channels}, 1.0, false)};
}

ResidualStage make_stage(Rng& rng, std::size_t in, std::size_t out, std::size_t stride,
                         std::size_t units) {
  ResidualStage stage;
  for (std::size_t u = 0; u < units; ++u) {
    const std::size_t unit_in = u == 0 ? in : out;
    const std::size_t unit_stride = u == 0 ? stride : 1;
    ResidualUnit unit{make_conv(rng, unit_in, out, 3, unit_stride), make_conv(rng, out, out, 3, 1),
                      make_bn(out), make_bn(out), false, {}, {}};
    if (unit_in != out || unit_stride != 1) {
      unit.has_projection = true;
      unit.projection = make_conv(rng, unit_in, out, 1, unit_stride);
      unit.projection_bn = make_bn(out);
    }
    stage.units.push_back(std::move(unit));
  }
  return stage;
}

BatchNorm clone_bn(const BatchNorm& bn) {
  return {bn.gamma.clone(), bn.beta.clone(), bn.running_mean.clone(), bn.running_var.clone()};
}

ResidualStage clone_stage(const ResidualStage& stage) {
  ResidualStage out;
  for (const auto& u : stage.units) {
    ResidualUnit c = u;
    c.conv1.weight = u.conv1.weight.clone();
    c.conv2.weight = u.conv2.weight.clone();
    c.bn1 = clone_bn(u.bn1);
    c.bn2 = clone_bn(u.bn2);
    if (u.has_projection) {
      c.projection.weight = u.projection.weight.clone();
      c.projection_bn = clone_bn(u.projection_bn);
    }
    out.units.push_back(std::move(c));
  }
  return out;
}

void collect_bn(const std::string& prefix, BatchNorm& bn, NamedTensors& params, NamedTensors& buffers) {
  params.emplace_back(prefix + ".gamma", bn.gamma);
  params.emplace_back(prefix + ".beta", bn.beta);
  buffers.emplace_back(prefix + ".running_mean", bn.running_mean);
  buffers.emplace_back(prefix + ".running_var", bn.running_var);
}

void collect_stage(const std::string& prefix, ResidualStage& stage, NamedTensors& params,
                   NamedTensors& buffers) {
  for (std::size_t u = 0; u < stage.units.size(); ++u) {
    auto& unit = stage.units[u];
    const std::string p = prefix + ".unit" + std::to_string(u);
    params.emplace_back(p + ".conv1.weight", unit.conv1.weight);
    collect_bn(p + ".bn1", unit.bn1, params, buffers);
    params.emplace_back(p + ".conv2.weight", unit.conv2.weight);
    collect_bn(p + ".bn2", unit.bn2, params, buffers);
    if (unit.has_projection) {
      params.emplace_back(p + ".projection.weight", unit.projection.weight);
      collect_bn(p + ".projection_bn", unit.projection_bn, params, buffers);
    }
  }
}

void collect_linear(const std::string& prefix, Linear& layer, NamedTensors& params) {
  params.emplace_back(prefix + ".weight", layer.weight);
  if (layer.bias.defined()) params.emplace_back(prefix + ".bias", layer.bias);
}

BatchNormMode bn_mode(ForwardMode mode) {
  switch (mode) {
    case ForwardMode::train: return BatchNormMode::train;
    case ForwardMode::train_frozen: return BatchNormMode::train_frozen;
    case ForwardMode::eval: break;
  }
  return BatchNormMode::eval;
}

const char* stream_name(std::size_t m) { return m == 0 ? "colour" : "infrared"; }

std::string join(const std::array<std::size_t, kLevels>& v) {
  std::ostringstream os;
  for (std::size_t i = 0; i < v.size(); ++i) os << (i ? "," : "") << v[i];
  return os.str();
}

std::size_t parse_size(const std::map<std::string, std::string>& meta, const std::string& key) {
  auto it = meta.find(key);
  if (it == meta.end()) throw ConfigError("checkpoint metadata lacks '" + key + "'");
  try {
    return static_cast<std::size_t>(std::stoull(it->second));
  } catch (const std::exception&) {
    throw ConfigError("checkpoint metadata '" + key + "' is not an integer: " + it->second);
  }
}

}  // namespace

std::vector<std::pair<std::size_t, std::size_t>> stripe_bounds(std::size_t height, std::size_t n_parts) {
  if (n_parts == 0 || height % n_parts != 0) {
    throw ConfigError("n_parts = " + std::to_string(n_parts) + " does not divide height " + std::to_string(height));
  }
  std::vector<std::pair<std::size_t, std::size_t>> out;
  const std::size_t stripe = height / n_parts;
  for (std::size_t i = 0; i < n_parts; ++i) out.emplace_back(i * stripe, (i + 1) * stripe);
  return out;
}

std::vector<std::size_t> BackboneConfig::valid_part_counts() const {
  std::vector<std::size_t> out;
  const std::size_t h = final_height();
  for (std::size_t n = 1; n <= h; ++n) {
    if (h % n == 0) out.push_back(n);
  }
  return out;
}

void BackboneConfig::validate() const {
  for (auto c : stage_channels) {
    if (c == 0) throw ConfigError("stage channels must be positive");
  }
  if (input_channels == 0 || units_per_stage == 0 || part_dim == 0 || discriminator_hidden == 0) {
    throw ConfigError("backbone sizes must be positive");
  }
  if (input_height == 0 || input_width == 0 || input_height % 8 != 0 || input_width % 8 != 0) {
    throw ConfigError("input height and width must be positive multiples of 8, got " +
                      std::to_string(input_height) + "x" + std::to_string(input_width));
  }
  if (n_parts == 0 || final_height() % n_parts != 0) {
    std::ostringstream os;
    os << "n_parts = " << n_parts << " does not divide the final feature-map height "
       << final_height() << "; valid part counts:";
    for (auto n : valid_part_counts()) os << ' ' << n;
    throw ConfigError(os.str());
  }
  if (num_identities == 0) throw ConfigError("num_identities must be positive");
}

std::map<std::string, std::string> BackboneConfig::to_meta() const {
  return {
      {"model.stage_channels", join(stage_channels)},
      {"model.input_channels", std::to_string(input_channels)},
      {"model.input_height", std::to_string(input_height)},
      {"model.input_width", std::to_string(input_width)},
      {"model.units_per_stage", std::to_string(units_per_stage)},
      {"model.n_parts", std::to_string(n_parts)},
      {"model.part_dim", std::to_string(part_dim)},
      {"model.num_identities", std::to_string(num_identities)},
      {"model.discriminator_hidden", std::to_string(discriminator_hidden)},
      {"model.mirrored_streams", mirrored_streams ? "1" : "0"},
  };
}

BackboneConfig BackboneConfig::from_meta(const std::map<std::string, std::string>& meta) {
  BackboneConfig c;
  auto it = meta.find("model.stage_channels");
  if (it == meta.end()) throw ConfigError("checkpoint metadata lacks 'model.stage_channels'");
  std::istringstream is(it->second);
  std::string item;
  for (std::size_t i = 0; i < kLevels; ++i) {
    if (!std::getline(is, item, ',')) throw ConfigError("malformed model.stage_channels");
    c.stage_channels[i] = static_cast<std::size_t>(std::stoull(item));
  }
  c.input_channels = parse_size(meta, "model.input_channels");
  c.input_height = parse_size(meta, "model.input_height");
  c.input_width = parse_size(meta, "model.input_width");
  c.units_per_stage = parse_size(meta, "model.units_per_stage");
  c.n_parts = parse_size(meta, "model.n_parts");
  c.part_dim = parse_size(meta, "model.part_dim");
  c.num_identities = parse_size(meta, "model.num_identities");
  c.discriminator_hidden = parse_size(meta, "model.discriminator_hidden");
  c.mirrored_streams = parse_size(meta, "model.mirrored_streams") != 0;
  c.validate();
  return c;
}

Tensor BatchNorm::operator()(const Tensor& x, ForwardMode mode) {
  return batch_norm(x, gamma, beta, running_mean, running_var, bn_mode(mode));
}

Tensor Linear::operator()(const Tensor& x) const {
  Tensor y = matmul(x, weight);
  return bias.defined() ? add_bias(y, bias) : y;
}

Tensor ResidualUnit::forward(const Tensor& x, ForwardMode mode) {
  Tensor h = relu(bn1(conv1(x), mode));
  h = bn2(conv2(h), mode);
  Tensor shortcut = has_projection ? projection_bn(projection(x), mode) : x;
  return relu(add(h, shortcut));
}

Tensor ResidualStage::forward(const Tensor& x, ForwardMode mode) {
  Tensor h = x;
  for (auto& unit : units) h = unit.forward(h, mode);
  return h;
}

DualStreamBackbone::DualStreamBackbone(const BackboneConfig& config, Rng& rng) {
  const auto& ch = config.stage_channels;
  for (std::size_t m = 0; m < 2; ++m) {
    std::size_t in = config.input_channels;
    for (std::size_t s = 0; s < 3; ++s) {
      streams_[m][s] = m == 1 && config.mirrored_streams
                           ? clone_stage(streams_[0][s])
                           : make_stage(rng, in, ch[s], s == 0 ? 1 : 2, config.units_per_stage);
      in = ch[s];
    }
  }
  shared_ = make_stage(rng, ch[2], ch[3], 2, config.units_per_stage);
}

void DualStreamBackbone::collect(NamedTensors& params, NamedTensors& buffers) {
  for (std::size_t m = 0; m < 2; ++m) {
    for (std::size_t s = 0; s < 3; ++s) {
      collect_stage(std::string(stream_name(m)) + ".stage" + std::to_string(s + 1), streams_[m][s],
                    params, buffers);
    }
  }
  collect_stage("shared.stage4", shared_, params, buffers);
}

PartHeads::PartHeads(const BackboneConfig& config, Rng& rng) {
  const std::size_t in = config.stage_channels[3];
  for (std::size_t i = 0; i < config.n_parts; ++i) {
    embeddings.push_back({gaussian_param(rng, {in, config.part_dim}, 1.0 / std::sqrt(double(in))),
                          filled({config.part_dim}, 0.0, true)});
    classifiers.push_back(
        {gaussian_param(rng, {config.part_dim, config.num_identities},
                        1.0 / std::sqrt(double(config.part_dim))),
         Tensor()});
  }
}

void PartHeads::collect(NamedTensors& params) {
  for (std::size_t i = 0; i < embeddings.size(); ++i) {
    collect_linear("heads.embed" + std::to_string(i), embeddings[i], params);
    collect_linear("heads.classifier" + std::to_string(i), classifiers[i], params);
  }
}

Tensor Discriminator::operator()(const Tensor& x) const { return sigmoid(output(relu(hidden(x)))); }

namespace {

// Hidden layer He-initialised; output layer zero so every D starts at 0.5.
Discriminator make_discriminator(Rng& rng, std::size_t in, std::size_t hidden) {
  return {{gaussian_param(rng, {in, hidden}, std::sqrt(2.0 / double(in))), filled({hidden}, 0.0, true)},
          {filled({hidden, 1}, 0.0, true), filled({1}, 0.0, true)}};
}

}  // namespace

DomainClassifierBank::DomainClassifierBank(const BackboneConfig& config, Rng& rng)
    : descriptor_dim_(config.descriptor_dim()) {
  for (std::size_t j = 0; j < kLevels; ++j) {
    levels_[j] = make_discriminator(rng, config.stage_channels[j], config.discriminator_hidden);
  }
  descriptor_ = make_discriminator(rng, descriptor_dim_, config.discriminator_hidden);
}

Tensor DomainClassifierBank::discriminate(const Tensor& g, int level) {
  if (level < 1 || level > kLevels) {
    throw UsageError("discriminate: level " + std::to_string(level) + " outside 1..4");
  }
  const auto& d = levels_[static_cast<std::size_t>(level - 1)];
  const std::size_t expected = d.hidden.weight.dim(0);
  Tensor x = g.rank() == 1 ? reshape(g, {1, g.dim(0)}) : g;
  if (x.rank() != 2 || x.dim(1) != expected) {
    throw UsageError("discriminate: level " + std::to_string(level) + " expects " +
                     std::to_string(expected) + " features, got " + to_string(g.shape()));
  }
  ++evaluations_;
  return d(x);
}

Tensor DomainClassifierBank::discriminate_descriptor(const Tensor& f) {
  Tensor x = f.rank() == 1 ? reshape(f, {1, f.dim(0)}) : f;
  if (x.rank() != 2 || x.dim(1) != descriptor_dim_) {
    throw UsageError("discriminate_descriptor: expects " + std::to_string(descriptor_dim_) +
                     " features, got " + to_string(f.shape()));
  }
  ++evaluations_;
  return descriptor_(x);
}

void DomainClassifierBank::collect(NamedTensors& params) {
  for (std::size_t j = 0; j < kLevels; ++j) {
    const std::string p = "disc.level" + std::to_string(j + 1);
    collect_linear(p + ".hidden", levels_[j].hidden, params);
    collect_linear(p + ".output", levels_[j].output, params);
  }
  collect_linear("disc.descriptor.hidden", descriptor_.hidden, params);
  collect_linear("disc.descriptor.output", descriptor_.output, params);
}

Tensor BatchForward::raw_descriptor() const {
  return parts.size() == 1 ? parts[0] : concat(std::span<const Tensor>(parts), 1);
}

ForwardRecord BatchForward::record(std::size_t row) const {
  if (row >= batch_size()) throw UsageError("record: row out of range");
  auto row_of = [row](const Tensor& t) -> Eigen::VectorXd { return t.matrix().row(row).transpose(); };
  ForwardRecord r;
  for (std::size_t j = 0; j < kLevels; ++j) r.g[j] = row_of(g[j]);
  for (const auto& p : parts) r.parts.push_back(row_of(p));
  for (const auto& l : logits) r.logits.push_back(row_of(l));
  r.avg_distribution = avg_distribution.row(static_cast<Eigen::Index>(row)).transpose();
  r.entropy = entropy[static_cast<Eigen::Index>(row)];
  r.modality = modalities[row];
  return r;
}

Eigen::VectorXd extract_descriptor(const ForwardRecord& record) {
  Eigen::Index dim = 0;
  for (const auto& p : record.parts) dim += p.size();
  Eigen::VectorXd f(dim);
  Eigen::Index offset = 0;
  for (const auto& p : record.parts) {
    f.segment(offset, p.size()) = p;
    offset += p.size();
  }
  return f / std::max(f.norm(), 1e-12);
}

RowMatrix extract_descriptors(const BatchForward& forward) {
  RowMatrix f = forward.raw_descriptor().matrix();
  for (Eigen::Index r = 0; r < f.rows(); ++r) f.row(r) /= std::max(f.row(r).norm(), 1e-12);
  return f;
}

ReidModel::ReidModel(const BackboneConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  Rng rng = make_rng(seed, 0);
  backbone_ = DualStreamBackbone(config_, rng);
  heads_ = PartHeads(config_, rng);
  bank_ = DomainClassifierBank(config_, rng);
  index_tensors();
}

void ReidModel::index_tensors() {
  params_.clear();
  buffers_.clear();
  backbone_.collect(params_, buffers_);
  heads_.collect(params_);
  bank_.collect(params_);
}

BatchForward ReidModel::forward(const Tensor& images, std::span<const Modality> modalities,
                                ForwardMode mode) {
  if (images.rank() != 4 || images.dim(1) != config_.input_channels ||
      images.dim(2) != config_.input_height || images.dim(3) != config_.input_width) {
    throw DimensionError("forward: images " + to_string(images.shape()) + " do not match [N," +
                         std::to_string(config_.input_channels) + "," +
                         std::to_string(config_.input_height) + "," +
                         std::to_string(config_.input_width) + "]");
  }
  const std::size_t n = images.dim(0);
  if (modalities.size() != n) throw UsageError("forward: one modality label per image required");

  std::array<std::vector<std::size_t>, 2> groups;
  for (std::size_t i = 0; i < n; ++i) {
    const int m = label_of(modalities[i]);
    if (m != 0 && m != 1) throw UsageError("forward: modality must be colour or infrared");
    groups[static_cast<std::size_t>(m)].push_back(i);
  }

  // Run each modality through its own stages 1-3, then both through stage 4.
  std::array<std::vector<Tensor>, 3> pooled;
  std::vector<Tensor> stage3;
  std::vector<std::size_t> order;
  for (std::size_t m = 0; m < 2; ++m) {
    if (groups[m].empty()) continue;
    Tensor x = groups[m].size() == n ? images : gather_rows(images, groups[m]);
    for (std::size_t s = 0; s < 3; ++s) {
      x = backbone_.stream_stage(static_cast<Modality>(m), s).forward(x, mode);
      pooled[s].push_back(global_avg_pool(x));
    }
    stage3.push_back(x);
    order.insert(order.end(), groups[m].begin(), groups[m].end());
  }
  auto merge = [](const std::vector<Tensor>& ts) {
    return ts.size() == 1 ? ts[0] : concat(std::span<const Tensor>(ts), 0);
  };
  Tensor final_map = backbone_.shared_stage().forward(merge(stage3), mode);

  std::vector<std::size_t> inverse(n);
  for (std::size_t p = 0; p < n; ++p) inverse[order[p]] = p;
  const bool identity = std::is_sorted(order.begin(), order.end());
  auto restore = [&](const Tensor& t) { return identity ? t : gather_rows(t, inverse); };

  BatchForward out;
  out.modalities.assign(modalities.begin(), modalities.end());
  for (std::size_t s = 0; s < 3; ++s) out.g[s] = restore(merge(pooled[s]));
  final_map = restore(final_map);
  out.g[3] = global_avg_pool(final_map);

  const auto stripes = stripe_bounds(config_.final_height(), config_.n_parts);
  for (std::size_t i = 0; i < config_.n_parts; ++i) {
    Tensor pooled_stripe = global_avg_pool(slice(final_map, 2, stripes[i].first, stripes[i].second));
    Tensor f = heads_.embeddings[i](pooled_stripe);
    out.logits.push_back(heads_.classifiers[i](f));
    out.parts.push_back(std::move(f));
  }

  // Class distribution of the averaged part logits, and its entropy.
  RowMatrix avg = RowMatrix::Zero(static_cast<Eigen::Index>(n),
                                  static_cast<Eigen::Index>(config_.num_identities));
  for (const auto& l : out.logits) avg += l.matrix();
  avg /= static_cast<double>(config_.n_parts);
  out.entropy.resize(static_cast<Eigen::Index>(n));
  if (avg.allFinite()) {
    out.avg_distribution = softmax(Tensor::from_matrix(avg)).matrix();
    for (Eigen::Index r = 0; r < static_cast<Eigen::Index>(n); ++r) {
      out.entropy[r] = xmreid::entropy(out.avg_distribution.row(r));
    }
  } else {
    // Left for the trainer's finiteness check to report by loss term.
    out.avg_distribution = RowMatrix::Constant(avg.rows(), avg.cols(), std::numeric_limits<double>::quiet_NaN());
    out.entropy.setConstant(std::numeric_limits<double>::quiet_NaN());
  }
  return out;
}

ForwardRecord ReidModel::forward(const Tensor& image, Modality modality, bool train_mode) {
  if (image.rank() != 3) throw DimensionError("forward: expected [C,H,W], got " + to_string(image.shape()));
  Tensor batch = reshape(image, {1, image.dim(0), image.dim(1), image.dim(2)});
  const Modality m[1] = {modality};
  return forward(batch, m, train_mode ? ForwardMode::train : ForwardMode::eval).record(0);
}

std::vector<Tensor> ReidModel::parameters_with_prefix(std::span<const std::string> prefixes) const {
  std::vector<Tensor> out;
  for (const auto& [name, t] : params_) {
    for (const auto& p : prefixes) {
      if (name.rfind(p, 0) == 0) {
        out.push_back(t);
        break;
      }
    }
  }
  return out;
}

std::vector<Tensor> ReidModel::backbone_parameters() const {
  const std::string p[] = {"colour.", "infrared.", "shared."};
  return parameters_with_prefix(p);
}

std::vector<Tensor> ReidModel::head_parameters() const {
  const std::string p[] = {"heads."};
  return parameters_with_prefix(p);
}

std::vector<Tensor> ReidModel::extractor_parameters() const {
  const std::string p[] = {"colour.", "infrared.", "shared.", "heads."};
  return parameters_with_prefix(p);
}

std::vector<Tensor> ReidModel::discriminator_parameters() const {
  const std::string p[] = {"disc."};
  return parameters_with_prefix(p);
}

std::size_t ReidModel::parameter_count(const std::string& prefix) const {
  std::size_t count = 0;
  for (const auto& [name, t] : params_) {
    if (name.rfind(prefix, 0) == 0) count += t.size();
  }
  return count;
}

void ReidModel::set_extractor_trainable(bool trainable) {
  for (auto& t : extractor_parameters()) t.set_requires_grad(trainable);
}

void ReidModel::set_discriminator_trainable(bool trainable) {
  for (auto& t : discriminator_parameters()) t.set_requires_grad(trainable);
}

void ReidModel::save(Checkpoint& checkpoint) const {
  for (const auto& [k, v] : config_.to_meta()) checkpoint.meta[k] = v;
  checkpoint.add("param.", params_);
  checkpoint.add("buffer.", buffers_);
}

void ReidModel::load(const Checkpoint& checkpoint) {
  const BackboneConfig stored = BackboneConfig::from_meta(checkpoint.meta);
  if (!(stored == config_)) {
    throw ConfigError("checkpoint was written for a different model configuration");
  }
  checkpoint.restore("param.", params_);
  checkpoint.restore("buffer.", buffers_);
}

ReidModel ReidModel::from_checkpoint(const Checkpoint& checkpoint) {
  ReidModel model(BackboneConfig::from_meta(checkpoint.meta), 0);
  model.load(checkpoint);
  return model;
}

}  // namespace xmreid

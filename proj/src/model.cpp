#include "metashift/model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "metashift/ops.hpp"

namespace metashift {

namespace {

std::string layer_name(std::size_t i) { return "layer " + std::to_string(i); }

Shape weight_shape(const LayerSpec& s) {
  if (s.kind == LayerKind::Conv) return {s.out, s.in, s.kernel, s.kernel};
  return {s.out, s.in};
}

Tensor flatten_rows(const Tensor& x) {
  if (x.rank() == 2) return x;
  const std::size_t n = x.dim(0);
  return ops::reshape(x, {n, x.numel() / n});
}

}  // namespace

Arch Arch::mlp(std::size_t in, std::size_t hidden, std::size_t feature_dim, double slope) {
  Arch a;
  a.input_shape = {in};
  a.layers = {LayerSpec{LayerKind::Linear, in, hidden}, LayerSpec{LayerKind::Linear, hidden, feature_dim}};
  a.slope = slope;
  return a;
}

Arch Arch::conv(Shape input_shape, const std::vector<std::size_t>& filters, std::size_t kernel) {
  if (input_shape.size() != 3) throw std::invalid_argument("Arch::conv: input shape must be [c,h,w]");
  Arch a;
  std::size_t channels = input_shape[0];
  a.input_shape = std::move(input_shape);
  for (auto f : filters) {
    a.layers.push_back(LayerSpec{LayerKind::Conv, channels, f, kernel, kernel / 2, true});
    channels = f;
  }
  return a;
}

std::size_t Arch::feature_dim() const {
  if (layers.empty()) throw std::invalid_argument("Arch: no layers");
  return layers.back().out;
}

void Arch::validate() const {
  if (layers.empty()) throw std::invalid_argument("Arch: no layers");
  Shape current = input_shape;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto& s = layers[i];
    if (s.in == 0 || s.out == 0 || s.kernel == 0) throw std::invalid_argument(layer_name(i) + ": zero size");
    if (s.kind == LayerKind::Conv) {
      if (current.size() != 3) throw std::invalid_argument(layer_name(i) + ": conv needs [c,h,w] input");
      if (current[0] != s.in) {
        throw std::invalid_argument(layer_name(i) + ": expects " + std::to_string(s.in) + " channels, gets " +
                                    std::to_string(current[0]));
      }
      const std::size_t span = s.kernel - 1;
      if (current[1] + 2 * s.padding < s.kernel || current[2] + 2 * s.padding < s.kernel) {
        throw std::invalid_argument(layer_name(i) + ": kernel larger than input " + shape_str(current));
      }
      std::size_t h = current[1] + 2 * s.padding - span, w = current[2] + 2 * s.padding - span;
      if (s.pool) h /= 2, w /= 2;
      if (h == 0 || w == 0) throw std::invalid_argument(layer_name(i) + ": spatial size collapses to zero");
      current = {s.out, h, w};
    } else {
      const std::size_t in = current.size() == 3 ? current[0] : shape_numel(current);
      if (in != s.in) {
        throw std::invalid_argument(layer_name(i) + ": expects " + std::to_string(s.in) + " inputs, gets " +
                                    std::to_string(in));
      }
      if (s.pool) throw std::invalid_argument(layer_name(i) + ": pooling on a linear layer");
      current = {s.out};
    }
  }
}

std::string Arch::describe() const {
  std::ostringstream out;
  out << "input " << shape_str(input_shape);
  for (const auto& s : layers) {
    if (s.kind == LayerKind::Conv) {
      out << " | conv" << s.kernel << "x" << s.kernel << " " << s.in << "->" << s.out << (s.pool ? " pool" : "");
    } else {
      out << " | linear " << s.in << "->" << s.out;
    }
  }
  out << " | slope " << slope;
  return out.str();
}

std::vector<double> Arch::encode() const {
  std::vector<double> code{1.0, double(input_shape.size())};
  for (auto d : input_shape) code.push_back(double(d));
  code.push_back(slope);
  code.push_back(double(layers.size()));
  for (const auto& s : layers) {
    code.insert(code.end(), {s.kind == LayerKind::Conv ? 0.0 : 1.0, double(s.in), double(s.out), double(s.kernel),
                             double(s.padding), s.pool ? 1.0 : 0.0});
  }
  return code;
}

Arch Arch::decode(std::span<const double> code) {
  std::size_t pos = 0;
  auto next = [&]() {
    if (pos >= code.size()) throw std::invalid_argument("Arch::decode: truncated architecture record");
    return code[pos++];
  };
  if (next() != 1.0) throw std::invalid_argument("Arch::decode: unknown architecture version");
  Arch a;
  const auto rank = std::size_t(next());
  for (std::size_t i = 0; i < rank; ++i) a.input_shape.push_back(std::size_t(next()));
  a.slope = next();
  const auto count = std::size_t(next());
  for (std::size_t i = 0; i < count; ++i) {
    LayerSpec s;
    s.kind = next() == 0.0 ? LayerKind::Conv : LayerKind::Linear;
    s.in = std::size_t(next());
    s.out = std::size_t(next());
    s.kernel = std::size_t(next());
    s.padding = std::size_t(next());
    s.pool = next() != 0.0;
    a.layers.push_back(s);
  }
  a.validate();
  return a;
}

Tensor run_layers(const Arch& arch, std::span<const LayerParams> params, const Tensor& x) {
  if (params.size() != arch.layers.size()) {
    throw std::invalid_argument("run_layers: " + std::to_string(params.size()) + " parameter sets for " +
                                std::to_string(arch.layers.size()) + " layers");
  }
  Tensor h = x;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& s = arch.layers[i];
    const auto& p = params[i];
    Tensor w = p.weight;
    Tensor b = p.bias;
    if (p.scale.defined()) {
      w = ops::mul(w, ops::broadcast_axis(p.scale, w.shape(), 0));
      b = ops::add(b, p.shift);
    }
    if (s.kind == LayerKind::Conv) {
      h = ops::add_channel_bias(ops::conv2d(h, w, s.padding), b);
      h = ops::leaky_relu(h, arch.slope);
      if (s.pool) h = ops::max_pool2x2(h);
      const bool last_conv = i + 1 == params.size() || arch.layers[i + 1].kind != LayerKind::Conv;
      if (last_conv) h = ops::global_mean_pool(h);
    } else {
      h = ops::leaky_relu(ops::linear(flatten_rows(h), w, b), arch.slope);
    }
  }
  return h;
}

std::vector<Tensor> SSParams::tensors() const {
  std::vector<Tensor> out;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    out.push_back(scale[i]);
    out.push_back(shift[i]);
  }
  return out;
}

SSParams SSParams::from_tensors(std::vector<std::size_t> layers, std::span<const Tensor> tensors) {
  if (tensors.size() != 2 * layers.size()) throw std::invalid_argument("SSParams: tensor count mismatch");
  SSParams ss;
  ss.layers = std::move(layers);
  for (std::size_t i = 0; i < ss.layers.size(); ++i) {
    ss.scale.push_back(tensors[2 * i]);
    ss.shift.push_back(tensors[2 * i + 1]);
  }
  return ss;
}

std::size_t SSParams::count() const {
  std::size_t n = 0;
  for (std::size_t i = 0; i < layers.size(); ++i) n += scale[i].numel() + shift[i].numel();
  return n;
}

FeatureExtractor::FeatureExtractor(Arch arch, Rng& rng) : arch_(std::move(arch)) {
  arch_.validate();
  for (const auto& s : arch_.layers) {
    const Shape ws = weight_shape(s);
    const double stddev = std::sqrt(2.0 / double(s.in * s.kernel * s.kernel));
    std::vector<double> w(shape_numel(ws));
    for (auto& v : w) v = stddev * rng.normal();
    layers_.push_back(Layer{s, Tensor::from(ws, std::move(w)), Tensor::zeros({s.out})});
  }
}

FeatureExtractor::FeatureExtractor(Arch arch, std::vector<Layer> layers) : arch_(std::move(arch)) {
  arch_.validate();
  if (layers.size() != arch_.layers.size()) throw std::invalid_argument("FeatureExtractor: layer count mismatch");
  layers_.resize(layers.size());
  for (std::size_t i = 0; i < layers.size(); ++i) {
    layers_[i].spec = arch_.layers[i];
    set_layer(i, layers[i].weight, layers[i].bias);
  }
}

void FeatureExtractor::set_layer(std::size_t i, const Tensor& weight, const Tensor& bias) {
  if (frozen_) throw FrozenError("feature extractor is frozen; " + layer_name(i) + " cannot be modified");
  auto& layer = layers_.at(i);
  const Shape ws = weight_shape(layer.spec);
  if (weight.shape() != ws || bias.shape() != Shape{layer.spec.out}) {
    throw ShapeError("set_layer", layer_name(i) + " expects weight " + shape_str(ws) + " and bias [" +
                                      std::to_string(layer.spec.out) + "], got " + shape_str(weight.shape()) +
                                      " and " + shape_str(bias.shape()));
  }
  layer.weight = weight.detach();
  layer.bias = bias.detach();
}

std::vector<Tensor> FeatureExtractor::parameters() const {
  std::vector<Tensor> out;
  for (const auto& l : layers_) {
    out.push_back(l.weight);
    out.push_back(l.bias);
  }
  return out;
}

std::uint64_t FeatureExtractor::weight_hash() const {
  const auto params = parameters();
  return hash_tensors(params);
}

Tensor FeatureExtractor::forward(const Tensor& x) const {
  std::vector<LayerParams> params;
  for (const auto& l : layers_) params.push_back({l.weight, l.bias, {}, {}});
  return run_layers(arch_, params, x);
}

Tensor FeatureExtractor::forward_with(const Tensor& x, std::span<const Tensor> weights) const {
  if (weights.size() != 2 * layers_.size()) {
    throw std::invalid_argument("forward_with: expected " + std::to_string(2 * layers_.size()) + " tensors, got " +
                                std::to_string(weights.size()));
  }
  std::vector<LayerParams> params;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    if (weights[2 * i].shape() != layers_[i].weight.shape() || weights[2 * i + 1].shape() != layers_[i].bias.shape()) {
      throw ShapeError("forward_with", layer_name(i) + " weight shape mismatch");
    }
    params.push_back({weights[2 * i], weights[2 * i + 1], {}, {}});
  }
  return run_layers(arch_, params, x);
}

Tensor FeatureExtractor::ss_forward(const Tensor& x, const SSParams& ss) const {
  check_ss(ss);
  std::vector<LayerParams> params;
  for (const auto& l : layers_) params.push_back({l.weight, l.bias, {}, {}});
  for (std::size_t k = 0; k < ss.layers.size(); ++k) {
    params[ss.layers[k]].scale = ss.scale[k];
    params[ss.layers[k]].shift = ss.shift[k];
  }
  return run_layers(arch_, params, x);
}

SSParams FeatureExtractor::init_ss(const std::vector<std::size_t>& layers) const {
  SSParams ss;
  for (auto i : layers) {
    if (i >= layers_.size()) throw std::invalid_argument("init_ss: no " + layer_name(i));
    ss.layers.push_back(i);
    ss.scale.push_back(Tensor::full({layers_[i].spec.out}, 1.0));
    ss.shift.push_back(Tensor::zeros({layers_[i].spec.out}));
  }
  return ss;
}

SSParams FeatureExtractor::init_ss() const {
  std::vector<std::size_t> all(layers_.size());
  std::iota(all.begin(), all.end(), std::size_t{0});
  return init_ss(all);
}

void FeatureExtractor::check_ss(const SSParams& ss) const {
  if (ss.scale.size() != ss.layers.size() || ss.shift.size() != ss.layers.size()) {
    throw ShapeError("ss_forward", "scale/shift lists do not match the layer list");
  }
  for (std::size_t k = 0; k < ss.layers.size(); ++k) {
    const std::size_t i = ss.layers[k];
    if (i >= layers_.size()) throw ShapeError("ss_forward", "SS refers to missing " + layer_name(i));
    const Shape expected{layers_[i].spec.out};
    if (ss.scale[k].shape() != expected || ss.shift[k].shape() != expected) {
      throw ShapeError("ss_forward", layer_name(i) + " has " + std::to_string(layers_[i].spec.out) +
                                         " neurons but SS scale " + shape_str(ss.scale[k].shape()) + ", shift " +
                                         shape_str(ss.shift[k].shape()));
    }
  }
}

std::size_t Classifier::feature_dim() const { return params.at(0).dim(1); }

std::size_t Classifier::way() const { return params.at(params.size() - 2).dim(0); }

Tensor Classifier::forward(const Tensor& features) const { return forward_with(features, params); }

Tensor Classifier::forward_with(const Tensor& features, std::span<const Tensor> params) {
  if (params.empty() || params.size() % 2 != 0) throw std::invalid_argument("Classifier: malformed parameter list");
  Tensor h = features;
  for (std::size_t i = 0; i < params.size(); i += 2) {
    h = ops::linear(h, params[i], params[i + 1]);
    if (i + 2 < params.size()) h = ops::relu(h);
  }
  return h;
}

Classifier init_classifier(std::size_t feature_dim, std::size_t way, Rng& rng, const std::vector<std::size_t>& hidden) {
  if (feature_dim == 0) throw std::invalid_argument("init_classifier: feature_dim must be >= 1");
  if (way == 0) throw std::invalid_argument("init_classifier: way must be >= 1");
  Classifier c;
  std::size_t in = feature_dim;
  std::vector<std::size_t> outs = hidden;
  outs.push_back(way);
  for (auto out : outs) {
    if (out == 0) throw std::invalid_argument("init_classifier: zero-width hidden layer");
    const double bound = 1.0 / std::sqrt(double(in));
    std::vector<double> w(out * in);
    for (auto& v : w) v = rng.uniform(-bound, bound);
    c.params.push_back(Tensor::from({out, in}, std::move(w)));
    c.params.push_back(Tensor::zeros({out}));
    in = out;
  }
  return c;
}

Classifier reset_classifier(Classifier&& old, std::size_t feature_dim, std::size_t way, Rng& rng,
                            const std::vector<std::size_t>& hidden) {
  old.params.clear();
  return init_classifier(feature_dim, way, rng, hidden);
}

Ratio Ratio::of(std::uint64_t num, std::uint64_t den) {
  if (den == 0) throw std::invalid_argument("Ratio: zero denominator");
  const std::uint64_t g = std::gcd(num, den);
  return g == 0 ? Ratio{0, 1} : Ratio{num / g, den / g};
}

std::string Ratio::str() const { return std::to_string(num) + "/" + std::to_string(den); }

ParamReport count_params(const Arch& arch) {
  ParamReport report;
  for (std::size_t i = 0; i < arch.layers.size(); ++i) {
    const auto& s = arch.layers[i];
    LayerCount c;
    c.layer = i;
    c.ft = std::uint64_t(s.out) * s.in * s.kernel * s.kernel + s.out;
    c.ss = 2 * std::uint64_t(s.out);
    c.ratio = Ratio::of(c.ss, c.ft);
    report.ft_total += c.ft;
    report.ss_total += c.ss;
    report.layers.push_back(c);
  }
  report.ratio = report.ft_total == 0 ? Ratio{} : Ratio::of(report.ss_total, report.ft_total);
  return report;
}

std::string GroupStats::columns() const {
  std::ostringstream out;
  out.precision(10);
  out << "# bin_lo bin_hi count\n";
  const double width = (hi - lo) / double(bins.size());
  for (std::size_t b = 0; b < bins.size(); ++b) {
    out << lo + width * double(b) << ' ' << lo + width * double(b + 1) << ' ' << bins[b] << '\n';
  }
  return out.str();
}

GroupStats group_statistics(std::span<const double> values, double lo, double hi, std::size_t bins) {
  if (!(hi > lo) || bins == 0) throw std::invalid_argument("group_statistics: empty histogram range");
  GroupStats g;
  g.count = values.size();
  g.lo = lo;
  g.hi = hi;
  g.bins.assign(bins, 0);
  if (values.empty()) return g;
  if (!all_finite(values)) throw std::invalid_argument("group_statistics: non-finite value");
  double total = 0.0;
  for (auto v : values) total += v;
  g.mean = total / double(values.size());
  double sq = 0.0;
  for (auto v : values) sq += (v - g.mean) * (v - g.mean);
  g.variance = sq / double(values.size());
  for (auto v : values) {
    const double pos = std::floor((v - lo) / (hi - lo) * double(bins));
    const auto b = std::size_t(std::clamp(pos, 0.0, double(bins - 1)));
    ++g.bins[b];
  }
  return g;
}

SSStatistics ss_statistics(const SSParams& ss) {
  std::vector<double> scales, shifts;
  for (std::size_t i = 0; i < ss.layers.size(); ++i) {
    for (auto v : ss.scale[i].data()) scales.push_back(v);
    for (auto v : ss.shift[i].data()) shifts.push_back(v);
  }
  return {group_statistics(scales, 0.0, 2.0), group_statistics(shifts, -1.0, 1.0)};
}

}  // namespace metashift

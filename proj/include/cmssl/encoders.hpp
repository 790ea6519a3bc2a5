#pragma once

#include <array>
#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "cmssl/errors.hpp"
#include "cmssl/graph.hpp"
#include "cmssl/params.hpp"
#include "cmssl/rng.hpp"
#include "cmssl/tensor.hpp"

namespace cmssl {

// One sensor source. Ids are dense 0..K-1 within a dataset; every sample has
// one image per modality with this fixed shape.
struct ModalitySpec {
  int id = 0;
  std::string name;
  std::size_t channels = 1;
  std::size_t height = 16;
  std::size_t width = 16;

  Shape image_shape() const { return {channels, height, width}; }
  std::size_t flat_dim() const { return channels * height * width; }
};

enum class EncoderKind { MLP, SmallCNN };

// conv -> relu -> 2x2 average pool, repeated per stage, then a dense layer to
// output_dim. Valid padding only, so stage geometry must divide cleanly.
struct ConvStage {
  std::size_t out_channels = 8;
  std::size_t kernel = 5;
  std::size_t stride = 1;
};

struct ProjectionHead {
  bool enabled = false;
  std::size_t hidden = 32;
  std::size_t out = 16;
};

struct EncoderSpec {
  EncoderKind kind = EncoderKind::MLP;
  std::vector<std::size_t> hidden_sizes = {64, 64};     // MLP
  std::vector<ConvStage> conv_stages = {{8, 5, 1}, {16, 5, 1}};  // SmallCNN
  std::size_t output_dim = 32;
  ProjectionHead projection;

  std::size_t embedding_dim() const { return projection.enabled ? projection.out : output_dim; }
};

namespace detail {

struct LayerDims {
  std::string name;
  std::size_t fan_in, fan_out;
  Shape w_shape;
  Shape b_shape;
};

// Layer inventory in forward order; used for both init and forward passes.
inline std::vector<LayerDims> layer_plan(const EncoderSpec& spec, const ModalitySpec& mspec) {
  std::vector<LayerDims> plan;
  if (spec.kind == EncoderKind::MLP) {
    std::size_t in = mspec.flat_dim();
    for (std::size_t i = 0; i < spec.hidden_sizes.size(); ++i) {
      std::size_t out = spec.hidden_sizes[i];
      plan.push_back({"fc" + std::to_string(i), in, out, {out, in}, {out}});
      in = out;
    }
    plan.push_back({"out", in, spec.output_dim, {spec.output_dim, in}, {spec.output_dim}});
  } else {
    std::size_t c = mspec.channels, h = mspec.height, w = mspec.width;
    for (std::size_t i = 0; i < spec.conv_stages.size(); ++i) {
      const ConvStage& st = spec.conv_stages[i];
      if (st.kernel > h || st.kernel > w)
        throw ConfigError("encoder: conv stage " + std::to_string(i) + " kernel " +
                          std::to_string(st.kernel) + " exceeds input " + std::to_string(h) + "x" +
                          std::to_string(w));
      std::size_t oh = (h - st.kernel) / st.stride + 1;
      std::size_t ow = (w - st.kernel) / st.stride + 1;
      if (oh % 2 != 0 || ow % 2 != 0)
        throw ConfigError("encoder: conv stage " + std::to_string(i) + " produces odd spatial dims " +
                          std::to_string(oh) + "x" + std::to_string(ow) + " before pooling");
      plan.push_back({"conv" + std::to_string(i), c * st.kernel * st.kernel,
                      st.out_channels * st.kernel * st.kernel,
                      {st.out_channels, c, st.kernel, st.kernel},
                      {st.out_channels}});
      c = st.out_channels;
      h = oh / 2;
      w = ow / 2;
    }
    std::size_t flat = c * h * w;
    plan.push_back({"out", flat, spec.output_dim, {spec.output_dim, flat}, {spec.output_dim}});
  }
  if (spec.projection.enabled) {
    plan.push_back({"proj0", spec.output_dim, spec.projection.hidden,
                    {spec.projection.hidden, spec.output_dim}, {spec.projection.hidden}});
    plan.push_back({"proj1", spec.projection.hidden, spec.projection.out,
                    {spec.projection.out, spec.projection.hidden}, {spec.projection.out}});
  }
  return plan;
}

}  // namespace detail

// Glorot-uniform weights, zero biases, deterministic per seed.
inline ParamSet init_encoder(const EncoderSpec& spec, const ModalitySpec& mspec, std::uint64_t seed) {
  ParamSet params;
  Rng rng(seed);
  for (const auto& layer : detail::layer_plan(spec, mspec)) {
    double a = std::sqrt(6.0 / static_cast<double>(layer.fan_in + layer.fan_out));
    Tensor w(layer.w_shape);
    for (double& v : w.values) v = rng.uniform(-a, a);
    w.set_requires_grad(true);
    Tensor b(layer.b_shape);  // zeros
    b.set_requires_grad(true);
    params.emplace(layer.name + "/w", std::move(w));
    params.emplace(layer.name + "/b", std::move(b));
  }
  return params;
}

struct EncodeOut {
  ad::Value representation;  // backbone output, used downstream
  ad::Value embedding;       // projection-head output when enabled, else representation
};

// Forward pass of one modality's encoder. Embeddings destined for the
// contrastive loss are l2-normalized by the caller.
inline EncodeOut encode(ad::Graph& g, const EncoderSpec& spec, const ModalitySpec& mspec,
                        ParamSet& params, const Tensor& image) {
  if (image.shape != mspec.image_shape())
    throw ShapeError("encode: image shape " + shape_str(image.shape) + " does not match modality " +
                     mspec.name + " " + shape_str(mspec.image_shape()));
  auto layer = [&](const std::string& name, ad::Value x) {
    return g.dense(x, g.leaf(params.at(name + "/w")), g.leaf(params.at(name + "/b")));
  };
  ad::Value x = g.constant(image);
  if (spec.kind == EncoderKind::MLP) {
    for (std::size_t i = 0; i < spec.hidden_sizes.size(); ++i)
      x = g.relu(layer("fc" + std::to_string(i), x));
  } else {
    for (std::size_t i = 0; i < spec.conv_stages.size(); ++i) {
      const std::string name = "conv" + std::to_string(i);
      ad::Value conv = g.conv2d(x, g.leaf(params.at(name + "/w")),
                                static_cast<int>(spec.conv_stages[i].stride));
      // bias per output channel, broadcast over the spatial grid as one node
      const Tensor& c = g.value(conv);
      Tensor& b = params.at(name + "/b");
      ad::Value bv = g.leaf(b);
      Tensor out = c;
      std::size_t hw = c.shape[1] * c.shape[2];
      for (std::size_t ch = 0; ch < c.shape[0]; ++ch)
        for (std::size_t p = 0; p < hw; ++p) out.values[ch * hw + p] += b.values[ch];
      std::array<ad::Value, 2> ins{conv, bv};
      x = g.custom("conv_bias", ins, std::move(out),
                   [hw](const Tensor& o, const std::vector<double>& gout,
                        std::span<const Tensor* const> inputs,
                        std::span<std::vector<double>* const> ginputs) {
                     (void)o;
                     (void)inputs;
                     if (ginputs[0])
                       for (std::size_t i = 0; i < gout.size(); ++i) (*ginputs[0])[i] += gout[i];
                     if (ginputs[1]) {
                       std::size_t channels = ginputs[1]->size();
                       for (std::size_t ch = 0; ch < channels; ++ch) {
                         double s = 0;
                         for (std::size_t p = 0; p < hw; ++p) s += gout[ch * hw + p];
                         (*ginputs[1])[ch] += s;
                       }
                     }
                   });
      x = g.avgpool2(g.relu(x));
    }
  }
  ad::Value repr = layer("out", x);
  ad::Value emb = repr;
  if (spec.projection.enabled) {
    emb = g.relu(layer("proj0", repr));
    emb = layer("proj1", emb);
  }
  return {repr, emb};
}

// One encoder per modality used by the active experiment. Parameter names are
// namespaced by modality name in checkpoints.
struct EncoderBundle {
  struct Entry {
    ModalitySpec modality;
    EncoderSpec spec;
    ParamSet params;
  };
  std::map<int, Entry> encoders;

  Entry& at(int modality_id) {
    auto it = encoders.find(modality_id);
    if (it == encoders.end())
      throw ContractError("encoder bundle: unknown modality_id " + std::to_string(modality_id));
    return it->second;
  }
  const Entry& at(int modality_id) const { return const_cast<EncoderBundle*>(this)->at(modality_id); }

  bool has(int modality_id) const { return encoders.count(modality_id) > 0; }

  EncodeOut encode(ad::Graph& g, int modality_id, const Tensor& image) {
    Entry& e = at(modality_id);
    return cmssl::encode(g, e.spec, e.modality, e.params, image);
  }

  // Flat list of (qualified name, tensor) in deterministic order, for
  // optimizers and checkpoints.
  std::vector<std::pair<std::string, Tensor*>> named_params() {
    std::vector<std::pair<std::string, Tensor*>> out;
    for (auto& [id, e] : encoders)
      for (auto& [name, t] : e.params) out.emplace_back(e.modality.name + "/" + name, &t);
    return out;
  }

  ParamSet merged_params() const {
    ParamSet out;
    for (const auto& [id, e] : encoders)
      for (const auto& [name, t] : e.params) out.emplace(e.modality.name + "/" + name, t);
    return out;
  }

  // Replace parameter values from a merged, namespaced ParamSet.
  void load_merged(const ParamSet& merged) {
    for (auto& [id, e] : encoders)
      for (auto& [name, t] : e.params) {
        auto it = merged.find(e.modality.name + "/" + name);
        if (it == merged.end())
          throw IoError("checkpoint is missing parameter " + e.modality.name + "/" + name);
        if (it->second.shape != t.shape)
          throw IoError("checkpoint parameter " + e.modality.name + "/" + name + " has shape " +
                        shape_str(it->second.shape) + ", expected " + shape_str(t.shape));
        t.values = it->second.values;
        t.zero_grad();
      }
  }
};

inline EncoderBundle make_bundle(const std::vector<ModalitySpec>& modalities,
                                 const std::map<int, EncoderSpec>& specs, std::uint64_t seed) {
  EncoderBundle bundle;
  for (const ModalitySpec& m : modalities) {
    auto it = specs.find(m.id);
    if (it == specs.end()) throw ConfigError("no encoder spec for modality " + m.name);
    Rng r(seed);
    std::uint64_t enc_seed = r.substream("encoder_init", static_cast<std::uint64_t>(m.id)).seed();
    bundle.encoders[m.id] = {m, it->second, init_encoder(it->second, m, enc_seed)};
  }
  return bundle;
}

}  // namespace cmssl

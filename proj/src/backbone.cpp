#include "mbfuse/backbone.hpp"

namespace mbfuse {

namespace {

template <typename T>
void check_pair(const DualFeature<T>& f, const char* op) {
  if (!(f.rgb.shape() == f.thermal.shape())) {
    throw ShapeError(std::string(op) + ": rgb " + f.rgb.shape().str() + " vs thermal " + f.thermal.shape().str());
  }
  if (f.rgb.shape().rank() != 4) throw ShapeError(std::string(op) + ": expected (N,C,H,W) features");
}

template <typename T>
void add_conv(ParamStore<T>& store, const std::string& name, int c_out, int c_in, int k, Rng& rng) {
  store.add(name + ".w", xavier_uniform<T>(Shape{c_out, c_in, k, k}, rng));
  store.add(name + ".b", Tensor<T>(Shape{c_out}));
}

template <typename T>
Var<T> conv(ParamBinding<T>& p, const std::string& name, Var<T> x, int stride, int pad) {
  return conv2d(x, p(name + ".w"), p(name + ".b"), stride, pad);
}

template <typename T>
Var<T> stream_forward(ParamBinding<T>& p, const std::string& prefix, const BlockSpec& spec, Var<T> identity,
                      Var<T> residual_in) {
  if (identity.shape().c() != spec.in_channels) {
    throw ShapeError(prefix + ": block expects " + std::to_string(spec.in_channels) + " channels, got " +
                     std::to_string(identity.shape().c()));
  }
  auto h = relu(conv(p, prefix + ".conv1", residual_in, spec.stride, 1));
  auto residual = conv(p, prefix + ".conv2", h, 1, 1);
  auto shortcut = spec.has_projection() ? conv(p, prefix + ".proj", identity, spec.stride, 0) : identity;
  return add(shortcut, residual);
}

}  // namespace

template <typename T>
DmafWeights<T> dmaf_weights(const DualFeature<T>& f) {
  check_pair(f, "dmaf_weights");
  return {tanh(global_avg(sub(f.rgb, f.thermal))), tanh(global_avg(sub(f.thermal, f.rgb)))};
}

template <typename T>
DmafComplement<T> dmaf_complement(const DualFeature<T>& f) {
  const auto v = dmaf_weights(f);
  return {mul(f.rgb, v.for_thermal), mul(f.thermal, v.for_rgb)};
}

template <typename T>
ModalityParts<T> decompose_modalities(const DualFeature<T>& f) {
  check_pair(f, "decompose_modalities");
  return {affine(add(f.rgb, f.thermal), 0.5), affine(sub(f.thermal, f.rgb), 0.5), affine(sub(f.rgb, f.thermal), 0.5)};
}

std::vector<BlockSpec> stage_blocks(const BackboneConfig& config, int stage_index) {
  if (stage_index < 0 || stage_index >= kStageCount) throw Error("stage index out of range");
  if (config.blocks_per_stage < 1) throw Error("blocks_per_stage must be positive");
  std::vector<BlockSpec> blocks;
  const int out = config.channels[stage_index];
  const int in = stage_index == 0 ? config.channels[0] : config.channels[stage_index - 1];
  blocks.push_back({in, out, stage_index == 0 ? 1 : 2});
  for (int b = 1; b < config.blocks_per_stage; ++b) blocks.push_back({out, out, 1});
  return blocks;
}

std::string block_prefix(int stage_index, int block) {
  return "bb.s" + std::to_string(stage_index + kFirstStage) + ".b" + std::to_string(block);
}

template <typename T>
void init_block(ParamStore<T>& store, const std::string& prefix, const BlockSpec& spec, Rng& rng) {
  for (const char* stream : {".rgb", ".thermal"}) {
    const std::string p = prefix + stream;
    add_conv(store, p + ".conv1", spec.out_channels, spec.in_channels, 3, rng);
    add_conv(store, p + ".conv2", spec.out_channels, spec.out_channels, 3, rng);
    if (spec.has_projection()) add_conv(store, p + ".proj", spec.out_channels, spec.in_channels, 1, rng);
  }
}

template <typename T>
void init_backbone(ParamStore<T>& store, const BackboneConfig& config, Rng& rng) {
  add_conv(store, "bb.stem.rgb", config.channels[0], config.rgb_channels, 3, rng);
  add_conv(store, "bb.stem.thermal", config.channels[0], config.thermal_channels, 3, rng);
  for (int s = 0; s < kStageCount; ++s) {
    const auto blocks = stage_blocks(config, s);
    for (std::size_t b = 0; b < blocks.size(); ++b) init_block(store, block_prefix(s, static_cast<int>(b)), blocks[b], rng);
  }
}

template <typename T>
DualFeature<T> dmaf_block_forward(const DualFeature<T>& f, ParamBinding<T>& params, const std::string& prefix,
                                  const BlockSpec& spec, bool dmaf) {
  check_pair(f, "dmaf_block_forward");
  Var<T> rgb_in = f.rgb;
  Var<T> thermal_in = f.thermal;
  if (dmaf) {
    const auto comp = dmaf_complement(f);
    rgb_in = add(f.rgb, comp.f_td);
    thermal_in = add(f.thermal, comp.f_rd);
  }
  return {stream_forward(params, prefix + ".rgb", spec, f.rgb, rgb_in),
          stream_forward(params, prefix + ".thermal", spec, f.thermal, thermal_in), f.stage};
}

template <typename T>
std::vector<DualFeature<T>> backbone_forward(Var<T> rgb_img, Var<T> thermal_img, ParamBinding<T>& params,
                                             const BackboneConfig& config) {
  const Shape& rs = rgb_img.shape();
  const Shape& ts = thermal_img.shape();
  if (rs.rank() != 4 || ts.rank() != 4 || rs.n() != ts.n() || rs.h() != ts.h() || rs.w() != ts.w()) {
    throw ShapeError("backbone_forward: image extents differ: " + rs.str() + " vs " + ts.str());
  }
  if (rs.h() % 16 != 0 || rs.w() % 16 != 0) {
    throw ShapeError("backbone_forward: input extents must be divisible by 16, got " + rs.str());
  }
  DualFeature<T> f{relu(conv(params, "bb.stem.rgb", rgb_img, 2, 1)),
                   relu(conv(params, "bb.stem.thermal", thermal_img, 2, 1)), kFirstStage};
  std::vector<DualFeature<T>> out;
  for (int s = 0; s < kStageCount; ++s) {
    const auto blocks = stage_blocks(config, s);
    for (std::size_t b = 0; b < blocks.size(); ++b) {
      f = dmaf_block_forward(f, params, block_prefix(s, static_cast<int>(b)), blocks[b], config.dmaf);
    }
    f.stage = s + kFirstStage;
    out.push_back(f);
  }
  return out;
}

#define MBFUSE_INSTANTIATE_BACKBONE(T)                                                                      \
  template DmafWeights<T> dmaf_weights(const DualFeature<T>&);                                              \
  template DmafComplement<T> dmaf_complement(const DualFeature<T>&);                                        \
  template ModalityParts<T> decompose_modalities(const DualFeature<T>&);                                    \
  template void init_block(ParamStore<T>&, const std::string&, const BlockSpec&, Rng&);                     \
  template void init_backbone(ParamStore<T>&, const BackboneConfig&, Rng&);                                 \
  template DualFeature<T> dmaf_block_forward(const DualFeature<T>&, ParamBinding<T>&, const std::string&,   \
                                             const BlockSpec&, bool);                                       \
  template std::vector<DualFeature<T>> backbone_forward(Var<T>, Var<T>, ParamBinding<T>&, const BackboneConfig&);

MBFUSE_INSTANTIATE_BACKBONE(float)
MBFUSE_INSTANTIATE_BACKBONE(double)

}  // namespace mbfuse

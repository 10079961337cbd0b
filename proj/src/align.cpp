#include "mbfuse/align.hpp"

namespace mbfuse {

template <typename T>
void init_align(ParamStore<T>& store, const std::string& prefix, int channels, int compress, Rng& rng) {
  for (const char* stream : {".rgb", ".thermal"}) {
    store.add(prefix + stream + ".w", xavier_uniform<T>(Shape{compress, channels, 1, 1}, rng));
    store.add(prefix + stream + ".b", Tensor<T>(Shape{compress}));
  }
  store.add(prefix + ".offset.w", Tensor<T>(Shape{4, 2 * compress, 3, 3}));
  store.add(prefix + ".offset.b", Tensor<T>(Shape{4}));
}

template <typename T>
OffsetPair<T> predict_offsets(const DualFeature<T>& f, ParamBinding<T>& p, const std::string& prefix) {
  if (!(f.rgb.shape() == f.thermal.shape())) throw ShapeError("predict_offsets: modality extents differ");
  const std::vector<Var<T>> parts{relu(conv2d(f.rgb, p(prefix + ".rgb.w"), p(prefix + ".rgb.b"))),
                                  relu(conv2d(f.thermal, p(prefix + ".thermal.w"), p(prefix + ".thermal.b")))};
  const auto joint = concat_channels<T>(parts);
  const auto offsets = conv2d(joint, p(prefix + ".offset.w"), p(prefix + ".offset.b"), 1, 1);
  return {slice_channels(offsets, 0, 2), slice_channels(offsets, 2, 2)};
}

template <typename T>
DualFeature<T> align(const DualFeature<T>& f, const OffsetPair<T>& offsets) {
  return {bilinear_sample(f.rgb, offsets.rgb), bilinear_sample(f.thermal, offsets.thermal), f.stage};
}

#define MBFUSE_INSTANTIATE_ALIGN(T)                                                          \
  template void init_align(ParamStore<T>&, const std::string&, int, int, Rng&);              \
  template OffsetPair<T> predict_offsets(const DualFeature<T>&, ParamBinding<T>&, const std::string&); \
  template DualFeature<T> align(const DualFeature<T>&, const OffsetPair<T>&);

MBFUSE_INSTANTIATE_ALIGN(float)
MBFUSE_INSTANTIATE_ALIGN(double)

}  // namespace mbfuse

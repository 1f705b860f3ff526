#include "gcp/architectures.hpp"

namespace gcp {

SpecBuilder::SpecBuilder(InputGeometry geo) : geo_(geo) {
  spec_.input_channels = geo.channels;
  spec_.input_height = geo.height;
  spec_.input_width = geo.width;
  LayerSpec in;
  in.kind = LayerKind::Input;
  in.name = "input";
  input_id_ = push(in);
}

int SpecBuilder::push(LayerSpec layer) {
  layer.id = next_id_++;
  spec_.layers.push_back(std::move(layer));
  return spec_.layers.back().id;
}

std::size_t SpecBuilder::channels_of(int id) const {
  const LayerSpec& l = spec_.layer(id);
  switch (l.kind) {
    case LayerKind::Input: return geo_.channels;
    case LayerKind::Conv: return l.conv.out_channels;
    case LayerKind::Linear: return l.classes;
    default: return channels_of(l.inputs[0]);
  }
}

int SpecBuilder::conv(int from, std::size_t out_channels, std::size_t kernel, std::size_t stride,
                      const std::string& name) {
  LayerSpec l;
  l.kind = LayerKind::Conv;
  l.inputs = {from};
  l.conv = {out_channels, channels_of(from), kernel, stride, kernel / 2};
  l.name = name;
  return push(l);
}

int SpecBuilder::batchnorm(int from, const std::string& name) {
  LayerSpec l;
  l.kind = LayerKind::BatchNorm;
  l.inputs = {from};
  l.name = name;
  return push(l);
}

int SpecBuilder::relu(int from, const std::string& name) {
  LayerSpec l;
  l.kind = LayerKind::ReLU;
  l.inputs = {from};
  l.name = name;
  return push(l);
}

int SpecBuilder::add(int lhs, int rhs, const std::string& name) {
  LayerSpec l;
  l.kind = LayerKind::Add;
  l.inputs = {lhs, rhs};
  l.name = name;
  return push(l);
}

int SpecBuilder::pool_and_linear(int from) {
  LayerSpec pool;
  pool.kind = LayerKind::GlobalAvgPool;
  pool.inputs = {from};
  pool.name = "pool";
  int p = push(pool);
  LayerSpec fc;
  fc.kind = LayerKind::Linear;
  fc.inputs = {p};
  fc.classes = geo_.classes;
  fc.name = "fc";
  return push(fc);
}

int SpecBuilder::conv_bn_relu(int from, std::size_t out_channels, std::size_t kernel, std::size_t stride,
                              const std::string& name) {
  int c = conv(from, out_channels, kernel, stride, name);
  int b = batchnorm(c, name + ".bn");
  return relu(b, name + ".relu");
}

NetworkSpec resnet8_spec(InputGeometry geo, std::array<std::size_t, 3> widths) {
  SpecBuilder b(geo);
  int x = b.conv_bn_relu(b.input(), widths[0], 3, 1, "stem");
  for (std::size_t s = 0; s < widths.size(); ++s) {
    const std::string stage = "stage" + std::to_string(s + 1);
    const std::size_t stride = s == 0 ? 1 : 2;
    int h = b.conv_bn_relu(x, widths[s], 3, stride, stage + ".conv1");
    int c2 = b.conv(h, widths[s], 3, 1, stage + ".conv2");
    int bn2 = b.batchnorm(c2, stage + ".conv2.bn");
    int shortcut = x;
    if (stride != 1 || b.channels_of(x) != widths[s]) {
      int proj = b.conv(x, widths[s], 1, stride, stage + ".shortcut");
      shortcut = b.batchnorm(proj, stage + ".shortcut.bn");
    }
    int sum = b.add(bn2, shortcut, stage + ".add");
    x = b.relu(sum, stage + ".relu");
  }
  b.pool_and_linear(x);
  return b.build();
}

NetworkSpec convnet6_spec(InputGeometry geo, std::array<std::size_t, 3> widths) {
  SpecBuilder b(geo);
  int x = b.input();
  for (std::size_t i = 0; i < 6; ++i) {
    const std::size_t stride = (i == 2 || i == 4) ? 2 : 1;
    x = b.conv_bn_relu(x, widths[i / 2], 3, stride, "conv" + std::to_string(i + 1));
  }
  b.pool_and_linear(x);
  return b.build();
}

NetworkSpec builtin_spec(const std::string& name, InputGeometry geo) {
  if (name == "resnet8") return resnet8_spec(geo);
  if (name == "convnet6") return convnet6_spec(geo);
  throw ConfigError("unknown architecture '" + name + "' (expected resnet8 or convnet6)");
}

}  // namespace gcp

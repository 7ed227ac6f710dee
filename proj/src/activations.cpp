#include "sunet/activations.hpp"

#include <map>

#include "sunet/tensor_io.hpp"

namespace sunet {

template <typename Scalar>
ActivationDumps<Scalar> dump_activations(const NetworkGraph& g, const ParamStore<Scalar>& params,
                                         const Tensor<Scalar>& input) {
  std::map<int, int> last;
  for (int i = 0; i < g.size(); ++i)
    if (g.node(i).level > 0) last[g.node(i).level] = i;
  if (last.empty()) throw std::invalid_argument("dump_activations: graph has no level markers");

  Tensor<Scalar> x = input;
  if (input.shape().n > 1) {
    const Shape s{1, input.shape().c, input.shape().h, input.shape().w};
    x = Tensor<Scalar>(s, input.vec().head(s.numel()));
  }
  const auto fwd = forward(g, params, x);

  ActivationDumps<Scalar> out;
  for (const auto& [level, id] : last) {
    const Tensor<Scalar>& t = fwd.values[static_cast<std::size_t>(id)];
    LevelDump<Scalar> d;
    d.level = level;
    d.node = g.node(id).name;
    d.l1 = -1.0;
    for (Index c = 0; c < t.shape().c; ++c) {
      const double l1 = static_cast<double>(t.plane(0, c).cwiseAbs().sum());
      if (l1 > d.l1) {
        d.l1 = l1;
        d.channel = c;
      }
    }
    d.map = Tensor<Scalar>({1, 1, t.shape().h, t.shape().w});
    d.map.plane(0, 0) = t.plane(0, d.channel);
    out.levels.push_back(std::move(d));
  }
  const bool segmentation = g.find("seg/classifier/conv") >= 0;
  if (segmentation) out.prediction = argmax_channels(fwd.output());
  return out;
}

template <typename Scalar>
std::vector<std::filesystem::path> write_activation_dumps(const ActivationDumps<Scalar>& d,
                                                          const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::vector<std::filesystem::path> paths;
  for (const auto& l : d.levels) {
    const std::string stem = "level_" + std::to_string(l.level);
    save_tensor(dir / (stem + ".sutn"), l.map);
    save_pnm(dir / (stem + ".pgm"), plane_to_raster(l.map, 0, 0));
    paths.push_back(dir / (stem + ".sutn"));
    paths.push_back(dir / (stem + ".pgm"));
  }
  if (d.prediction.size() > 0) {
    save_pnm(dir / "prediction.pgm", labels_to_raster(d.prediction));
    paths.push_back(dir / "prediction.pgm");
  }
  return paths;
}

template ActivationDumps<float> dump_activations(const NetworkGraph&, const ParamStore<float>&, const Tensor<float>&);
template ActivationDumps<double> dump_activations(const NetworkGraph&, const ParamStore<double>&,
                                                  const Tensor<double>&);
template std::vector<std::filesystem::path> write_activation_dumps(const ActivationDumps<float>&,
                                                                   const std::filesystem::path&);
template std::vector<std::filesystem::path> write_activation_dumps(const ActivationDumps<double>&,
                                                                   const std::filesystem::path&);

}  // namespace sunet

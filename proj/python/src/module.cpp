#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "glandseg/cli.hpp"
#include "glandseg/dataset_io.hpp"
#include "glandseg/evaluation.hpp"
#include "glandseg/network.hpp"
#include "glandseg/postprocess.hpp"
#include "glandseg/tiling.hpp"

namespace py = pybind11;
using namespace glandseg;

namespace {

template <typename T>
using CArray = py::array_t<T, py::array::c_style | py::array::forcecast>;

// HxW or HxWxC numpy array -> Image<T>.
template <typename T>
Image<T> to_image(const CArray<T>& a, const char* what) {
  if (a.ndim() != 2 && a.ndim() != 3) throw ShapeError(std::string(what) + " must be 2-D or 3-D");
  const int h = static_cast<int>(a.shape(0)), w = static_cast<int>(a.shape(1));
  const int c = a.ndim() == 3 ? static_cast<int>(a.shape(2)) : 1;
  Image<T> img(h, w, c);
  std::copy(a.data(), a.data() + a.size(), img.data());
  return img;
}

template <typename T>
CArray<T> to_array(const Image<T>& img, bool keep_channel_axis = false) {
  std::vector<py::ssize_t> shape{img.height(), img.width()};
  if (keep_channel_axis || img.channels() > 1) shape.push_back(img.channels());
  CArray<T> out(shape);
  std::copy(img.data(), img.data() + img.size(), out.mutable_data());
  return out;
}

RgbImage to_rgb(const CArray<std::uint8_t>& a) {
  if (a.ndim() != 3 || a.shape(2) != 3) throw ShapeError("image must be H x W x 3 uint8");
  return to_image<std::uint8_t>(a, "image");
}

py::dict grid_to_dict(const PatchGrid& g) {
  py::dict d;
  d["orig_h"] = g.orig_h;
  d["orig_w"] = g.orig_w;
  d["patch_size"] = g.patch_size;
  d["pad_h"] = g.pad_h;
  d["pad_w"] = g.pad_w;
  d["rows"] = g.rows;
  d["cols"] = g.cols;
  d["pad_mode"] = to_string(g.pad_mode);
  return d;
}

PatchGrid grid_from_dict(const py::dict& d) {
  PatchGrid g;
  g.orig_h = d["orig_h"].cast<int>();
  g.orig_w = d["orig_w"].cast<int>();
  g.patch_size = d["patch_size"].cast<int>();
  g.pad_h = d["pad_h"].cast<int>();
  g.pad_w = d["pad_w"].cast<int>();
  g.rows = d["rows"].cast<int>();
  g.cols = d["cols"].cast<int>();
  g.pad_mode = parse_pad_mode(d["pad_mode"].cast<std::string>());
  return g;
}

// Patch stacks travel as N x P x P x C arrays.
template <typename T>
py::tuple split_array(const CArray<T>& image, int patch_size, const std::string& pad_mode) {
  const auto img = to_image<T>(image, "image");
  const auto tiles = split(img, patch_size, parse_pad_mode(pad_mode));
  CArray<T> out({static_cast<py::ssize_t>(tiles.patches.size()), static_cast<py::ssize_t>(patch_size),
                 static_cast<py::ssize_t>(patch_size), static_cast<py::ssize_t>(img.channels())});
  T* dst = out.mutable_data();
  for (const auto& p : tiles.patches) dst = std::copy(p.data(), p.data() + p.size(), dst);
  return py::make_tuple(out, grid_to_dict(tiles.grid));
}

template <typename T>
CArray<T> merge_array(const CArray<T>& patches, const py::dict& grid_dict, bool squeeze) {
  if (patches.ndim() != 4) throw ShapeError("patches must be N x P x P x C");
  const auto grid = grid_from_dict(grid_dict);
  const int p = static_cast<int>(patches.shape(1)), c = static_cast<int>(patches.shape(3));
  if (patches.shape(2) != p) throw ShapeError("patches must be square");
  std::vector<Image<T>> list;
  const T* src = patches.data();
  for (py::ssize_t i = 0; i < patches.shape(0); ++i) {
    Image<T> img(p, p, c);
    std::copy(src, src + img.size(), img.data());
    src += img.size();
    list.push_back(std::move(img));
  }
  const auto merged = merge(grid, list);
  return to_array(merged, !squeeze);
}

FusionConfig fusion_config(double tau_gland, double tau_contour, int min_object_px, bool fill, int dilate) {
  FusionConfig cfg;
  cfg.tau_gland = tau_gland;
  cfg.tau_contour = tau_contour;
  cfg.min_object_px = min_object_px;
  cfg.fill_holes = fill;
  cfg.restore_dilate_px = dilate;
  cfg.validate();
  return cfg;
}

NetworkConfig network_config(const py::dict& d) {
  NetworkConfig cfg;
  for (const auto& [k, v] : d) {
    const auto key = k.cast<std::string>();
    if (key == "depth") cfg.depth = v.cast<int>();
    else if (key == "base_filters") cfg.base_filters = v.cast<int>();
    else if (key == "kernel") cfg.kernel = v.cast<int>();
    else if (key == "input_size") cfg.input_size = v.cast<int>();
    else if (key == "bn_momentum") cfg.bn_momentum = v.cast<double>();
    else if (key == "bn_epsilon") cfg.bn_epsilon = v.cast<double>();
    else throw InputError("unknown network key '" + key + "'");
  }
  cfg.validate();
  return cfg;
}

// A network with its parameters, for whole-image inference from Python.
class Model {
 public:
  explicit Model(NetworkParams<float> params) : net_(params.config), params_(std::move(params)) {}

  static Model load(const std::filesystem::path& path) { return Model(load_checkpoint<float>(path)); }
  static Model random(const py::dict& cfg, std::uint64_t seed) {
    return Model(UNet<float>(network_config(cfg)).init_params(seed));
  }

  py::tuple predict(const CArray<std::uint8_t>& image, int batch_size, const std::string& pad_mode) const {
    const auto rgb = to_rgb(image);
    ProbabilityPair probs;
    {
      py::gil_scoped_release release;
      probs = predict_probabilities(net_, params_, rgb, batch_size, parse_pad_mode(pad_mode));
    }
    return py::make_tuple(to_array(probs.gland), to_array(probs.contour));
  }

  void save(const std::filesystem::path& path) const { save_checkpoint(params_, path); }
  py::dict config() const {
    const auto& c = params_.config;
    py::dict d;
    d["depth"] = c.depth;
    d["base_filters"] = c.base_filters;
    d["kernel"] = c.kernel;
    d["input_size"] = c.input_size;
    d["bn_momentum"] = c.bn_momentum;
    d["bn_epsilon"] = c.bn_epsilon;
    return d;
  }
  std::size_t parameter_count() const { return params_.weights.total_size(); }

 private:
  UNet<float> net_;
  NetworkParams<float> params_;
};

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Gland / contour segmentation core";

  // Translators run newest first, so the base class is registered first.
  py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
  py::register_exception<InputError>(m, "InputError", PyExc_ValueError);
  py::register_exception<ShapeError>(m, "ShapeError", PyExc_ValueError);
  py::register_exception<NumericalError>(m, "NumericalError", PyExc_ArithmeticError);

  m.def(
      "synthetic_sample",
      [](const std::string& id, int height, int width, std::uint64_t seed) {
        const auto s = generate_synthetic_sample(id, height, width, seed);
        return py::make_tuple(to_array(s.image), to_array(s.instance_mask));
      },
      py::arg("id"), py::arg("height"), py::arg("width"), py::arg("seed"),
      "Synthetic (image H x W x 3 uint8, instance mask H x W int32).");

  m.def(
      "derive_targets",
      [](const CArray<std::int32_t>& mask, int band_width) {
        const auto t = derive_targets(to_image<std::int32_t>(mask, "mask"), band_width);
        return py::make_tuple(to_array(t.gland), to_array(t.contour));
      },
      py::arg("mask"), py::arg("band_width") = 2, "(gland, contour) uint8 masks of an instance map.");

  m.def("split", &split_array<std::uint8_t>, py::arg("image"), py::arg("patch_size") = 256,
        py::arg("pad_mode") = "reflect", "Tile an image into an N x P x P x C stack and a grid dict.");
  m.def("split", &split_array<float>, py::arg("image"), py::arg("patch_size") = 256, py::arg("pad_mode") = "reflect");
  m.def("merge", &merge_array<std::uint8_t>, py::arg("patches"), py::arg("grid"), py::arg("squeeze") = true,
        "Inverse of split; drops a singleton channel axis when squeeze is set.");
  m.def("merge", &merge_array<float>, py::arg("patches"), py::arg("grid"), py::arg("squeeze") = true);

  m.def(
      "fuse",
      [](const CArray<float>& gland, const CArray<float>& contour, double tau_gland, double tau_contour,
         int min_object_px, bool fill, int dilate) {
        const auto cfg = fusion_config(tau_gland, tau_contour, min_object_px, fill, dilate);
        const ProbabilityPair probs{to_image<float>(gland, "gland"), to_image<float>(contour, "contour")};
        return to_array(fuse(probs, cfg).labels);
      },
      py::arg("gland"), py::arg("contour"), py::arg("tau_gland") = 0.5, py::arg("tau_contour") = 0.5,
      py::arg("min_object_px") = 500, py::arg("fill_holes") = true, py::arg("restore_dilate_px") = 2,
      "Instance label map (int32) from the two probability maps.");

  m.def(
      "pixel_dice",
      [](const CArray<std::uint8_t>& p, const CArray<std::uint8_t>& g) {
        return pixel_dice(to_image<std::uint8_t>(p, "pred"), to_image<std::uint8_t>(g, "gt"));
      },
      py::arg("pred"), py::arg("gt"));
  m.def(
      "object_f1",
      [](const CArray<std::int32_t>& p, const CArray<std::int32_t>& g, double iou) {
        const auto s = object_f1(to_image<std::int32_t>(p, "pred"), to_image<std::int32_t>(g, "gt"), iou);
        py::dict d;
        d["precision"] = s.precision;
        d["recall"] = s.recall;
        d["f1"] = s.f1;
        d["true_positives"] = s.true_positives;
        return d;
      },
      py::arg("pred"), py::arg("gt"), py::arg("iou_match") = 0.5);
  m.def(
      "object_dice",
      [](const CArray<std::int32_t>& p, const CArray<std::int32_t>& g) {
        return object_dice(to_image<std::int32_t>(p, "pred"), to_image<std::int32_t>(g, "gt"));
      },
      py::arg("pred"), py::arg("gt"));

  py::class_<Model>(m, "Model")
      .def_static("load", &Model::load, py::arg("path"))
      .def_static("random", &Model::random, py::arg("config") = py::dict(), py::arg("seed") = 0)
      .def("predict", &Model::predict, py::arg("image"), py::arg("batch_size") = 4, py::arg("pad_mode") = "reflect",
           "(gland, contour) float32 foreground probabilities, same size as the image.")
      .def("save", &Model::save, py::arg("path"))
      .def_property_readonly("config", &Model::config)
      .def_property_readonly("parameter_count", &Model::parameter_count);

  m.def(
      "main",
      [](const std::vector<std::string>& args) {
        std::vector<std::string> argv_s{"glandseg"};
        argv_s.insert(argv_s.end(), args.begin(), args.end());
        std::vector<char*> argv;
        for (auto& s : argv_s) argv.push_back(s.data());
        py::gil_scoped_release release;
        return run_cli(static_cast<int>(argv.size()), argv.data());
      },
      py::arg("args"), "Run the command-line interface; returns the exit code.");
}

#include <pybind11/eigen.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "carseg/camgen.hpp"
#include "carseg/config.hpp"
#include "carseg/eval.hpp"
#include "carseg/pipeline.hpp"
#include "carseg/prompter.hpp"
#include "carseg/toy_backend.hpp"

namespace py = pybind11;
using namespace carseg;

namespace {

using U8Array = py::array_t<uint8_t, py::array::c_style | py::array::forcecast>;
using F32Array = py::array_t<float, py::array::c_style | py::array::forcecast>;

ImageBuf image_from_array(const U8Array& a) {
  if (a.ndim() != 3 || a.shape(2) != 3) throw InvalidArgument("image must be an (H, W, 3) uint8 array");
  const auto h = static_cast<int>(a.shape(0)), w = static_cast<int>(a.shape(1));
  return ImageBuf(w, h, std::vector<uint8_t>(a.data(), a.data() + a.size()));
}

U8Array image_to_array(const ImageBuf& img) {
  U8Array out({img.height(), img.width(), 3});
  std::copy(img.bytes().begin(), img.bytes().end(), out.mutable_data());
  return out;
}

BinMask mask_from_array(const py::array& any) {
  const auto a = py::array_t<uint8_t, py::array::c_style | py::array::forcecast>::ensure(any.attr("astype")("uint8"));
  if (a.ndim() != 2) throw InvalidArgument("mask must be a 2-D array");
  std::vector<uint8_t> bits(a.data(), a.data() + a.size());
  for (uint8_t& b : bits) b = b != 0;
  return BinMask(static_cast<int>(a.shape(1)), static_cast<int>(a.shape(0)), std::move(bits));
}

py::array_t<bool> mask_to_array(const BinMask& m) {
  py::array_t<bool> out({m.height(), m.width()});
  bool* p = out.mutable_data();
  for (size_t i = 0; i < static_cast<size_t>(m.width()) * m.height(); ++i) p[i] = m.at(i);
  return out;
}

SoftMask soft_from_array(const F32Array& a) {
  if (a.ndim() != 2) throw InvalidArgument("soft mask must be a 2-D array");
  return SoftMask(static_cast<int>(a.shape(1)), static_cast<int>(a.shape(0)),
                  std::vector<float>(a.data(), a.data() + a.size()));
}

F32Array soft_to_array(const SoftMask& m) {
  F32Array out({m.height(), m.width()});
  std::copy(m.values().begin(), m.values().end(), out.mutable_data());
  return out;
}

py::array_t<int32_t> labels_to_array(const LabelMap& l) {
  py::array_t<int32_t> out({l.height(), l.width()});
  std::copy(l.values().begin(), l.values().end(), out.mutable_data());
  return out;
}

LabelMap labels_from_array(const py::array_t<int32_t, py::array::c_style | py::array::forcecast>& a) {
  if (a.ndim() != 2) throw InvalidArgument("label map must be a 2-D array");
  return LabelMap(static_cast<int>(a.shape(1)), static_cast<int>(a.shape(0)),
                  std::vector<int32_t>(a.data(), a.data() + a.size()));
}

py::dict result_dict(const SegResult& r) {
  py::list masks, surviving;
  for (const SoftMask& m : r.soft_masks) masks.append(soft_to_array(m));
  for (const Query& q : r.surviving_queries.entries()) surviving.append(py::make_tuple(q.original_index, q.text));
  py::dict d;
  d["labels"] = labels_to_array(r.label_map);
  d["soft_masks"] = masks;
  d["surviving"] = surviving;
  d["steps"] = r.steps;
  return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Recurrent open-vocabulary segmentation engine";
  m.attr("BACKGROUND") = kBackground;

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<InvalidArgument>(m, "InvalidArgument", PyExc_ValueError);
  py::register_exception<BackendError>(m, "BackendError", PyExc_RuntimeError);
  py::register_exception<IoError>(m, "IoError", PyExc_OSError);
  py::register_exception<EmptyMaskError>(m, "EmptyMaskError", PyExc_ValueError);

  py::class_<CrfParams>(m, "CrfParams")
      .def(py::init<>())
      .def_readwrite("gauss_sxy", &CrfParams::gauss_sxy)
      .def_readwrite("gauss_w", &CrfParams::gauss_w)
      .def_readwrite("bilat_sxy", &CrfParams::bilat_sxy)
      .def_readwrite("bilat_srgb", &CrfParams::bilat_srgb)
      .def_readwrite("bilat_w", &CrfParams::bilat_w)
      .def_readwrite("iterations", &CrfParams::iterations);

  py::class_<PipelineConfig>(m, "PipelineConfig")
      .def(py::init(&PipelineConfig::defaults))
      .def_readwrite("eta", &PipelineConfig::eta)
      .def_readwrite("theta", &PipelineConfig::theta)
      .def_readwrite("lambda_", &PipelineConfig::lambda)
      .def_readwrite("phi_iom", &PipelineConfig::phi_iom)
      .def_readwrite("phi_iou", &PipelineConfig::phi_iou)
      .def_readwrite("caa_iters", &PipelineConfig::caa_iters)
      .def_readwrite("sinkhorn_iters", &PipelineConfig::sinkhorn_iters)
      .def_readwrite("last_attn_layers", &PipelineConfig::last_attn_layers)
      .def_readwrite("bg_queries", &PipelineConfig::bg_queries)
      .def_readwrite("crf_enabled", &PipelineConfig::crf_enabled)
      .def_readwrite("crf", &PipelineConfig::crf)
      .def_property(
          "prompts",
          [](const PipelineConfig& c) {
            std::vector<std::string> out;
            for (const PromptType t : c.prompt.types) out.push_back(to_string(t));
            return out;
          },
          [](PipelineConfig& c, const std::vector<std::string>& names) {
            std::string csv;
            for (const auto& n : names) csv += (csv.empty() ? "" : ",") + n;
            c.prompt.types = parse_prompt_types(csv);
          })
      .def("validate", &validate_config)
      .def("to_text", &format_config)
      .def("fingerprint", &config_fingerprint);
  m.def("parse_config", [](const std::string& text) { return parse_config(text); }, py::arg("text"));

  py::class_<toy::World>(m, "ToyWorld")
      .def_property_readonly("image", [](const toy::World& w) { return image_to_array(w.image); })
      .def_property_readonly("ground_truth", [](const toy::World& w) { return labels_to_array(w.ground_truth); })
      .def_readonly("queries", &toy::World::queries)
      .def_readonly("planted", &toy::World::planted)
      .def_readonly("absent", &toy::World::absent);
  m.def(
      "make_world",
      [](uint64_t seed, int size, int planted, int absent, int stuff) {
        return toy::make_world(seed, {.size = size, .planted = planted, .absent = absent, .stuff = stuff});
      },
      py::arg("seed"), py::arg("size") = 64, py::arg("planted") = 3, py::arg("absent") = 2, py::arg("stuff") = 1);

  py::class_<Backend>(m, "Backend")
      .def("describe", &Backend::describe)
      .def(
          "score",
          [](Backend& b, const std::vector<U8Array>& images, const std::vector<std::string>& texts) {
            std::vector<ImageBuf> imgs;
            for (const auto& a : images) imgs.push_back(image_from_array(a));
            py::gil_scoped_release release;
            return b.score(imgs, texts);
          },
          py::arg("images"), py::arg("texts"));
  m.def("make_backend", &make_backend, py::arg("descriptor"));
  m.def(
      "toy_backend_for",
      [](const toy::World& w) -> std::unique_ptr<Backend> { return std::make_unique<toy::ToyBackend>(w.lexicon); },
      py::arg("world"));

  m.def(
      "segment",
      [](Backend& b, const U8Array& image, const std::vector<std::string>& queries, const PipelineConfig& cfg) {
        const ImageBuf img = image_from_array(image);
        SegmentOutput out;
        {
          py::gil_scoped_release release;
          out = segment(b, img, queries, cfg);
        }
        return result_dict(out.result);
      },
      py::arg("backend"), py::arg("image"), py::arg("queries"), py::arg("config") = PipelineConfig::defaults());

  m.def("binarize", [](const F32Array& m, double eta) { return mask_to_array(binarize(soft_from_array(m), eta)); },
        py::arg("mask"), py::arg("eta"));
  m.def(
      "sinkhorn",
      [](const Eigen::MatrixXd& w, int iters, double tol) {
        const SinkhornResult r = sinkhorn(w, iters, tol);
        return py::make_tuple(r.matrix, r.iterations, r.deviation);
      },
      py::arg("w"), py::arg("iters") = 50, py::arg("tol") = 1e-6);
  m.def("symmetric_affinity", [](const Eigen::MatrixXd& d) { return symmetric_affinity(d).a; });
  m.def(
      "apply_visual_prompts",
      [](const U8Array& image, const py::array& mask, const std::vector<std::string>& types, int thickness) {
        PromptSpec spec;
        std::string csv;
        for (const auto& n : types) csv += (csv.empty() ? "" : ",") + n;
        spec.types = parse_prompt_types(csv);
        spec.thickness = thickness;
        return image_to_array(apply_visual_prompts(image_from_array(image), mask_from_array(mask), spec));
      },
      py::arg("image"), py::arg("mask"), py::arg("types"), py::arg("thickness") = 1);
  m.def("gaussian_blur",
        [](const U8Array& image, int kernel, double sigma) {
          return image_to_array(gaussian_blur(image_from_array(image), kernel, sigma));
        },
        py::arg("image"), py::arg("kernel") = 15, py::arg("sigma") = 0.0);

  m.def("iom", [](const py::array& a, const py::array& b) { return iom(mask_from_array(a), mask_from_array(b)); });
  m.def("iou", [](const py::array& a, const py::array& b) { return iou(mask_from_array(a), mask_from_array(b)); });
  m.def("region_j",
        [](const py::array& a, const py::array& b) { return region_j(mask_from_array(a), mask_from_array(b)); });
  m.def(
      "contour_f",
      [](const py::array& a, const py::array& b, int tol) { return contour_f(mask_from_array(a), mask_from_array(b), tol); },
      py::arg("pred"), py::arg("gt"), py::arg("tol") = 1);
  m.def(
      "miou",
      [](const std::vector<py::array_t<int32_t, py::array::c_style | py::array::forcecast>>& preds,
         const std::vector<py::array_t<int32_t, py::array::c_style | py::array::forcecast>>& gts, int num_classes) {
        std::vector<LabelMap> p, g;
        for (const auto& a : preds) p.push_back(labels_from_array(a));
        for (const auto& a : gts) g.push_back(labels_from_array(a));
        const MetricReport r = miou(p, g, num_classes);
        py::dict per_class;
        for (const ClassIou& c : r.classes) per_class[py::int_(c.id)] = c.iou;
        return py::make_tuple(r.miou, per_class);
      },
      py::arg("preds"), py::arg("gts"), py::arg("num_classes"));
}

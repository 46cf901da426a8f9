#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <cstring>
#include <sstream>

#include "amieod/cli.hpp"
#include "amieod/config.hpp"
#include "amieod/core.hpp"
#include "amieod/datakit.hpp"
#include "amieod/dgrl.hpp"
#include "amieod/errors.hpp"
#include "amieod/evalkit.hpp"

namespace py = pybind11;
using namespace amieod;

namespace {

using FloatArray = py::array_t<float, py::array::c_style | py::array::forcecast>;

torch::Tensor to_tensor(const FloatArray& a) {
  std::vector<int64_t> shape(a.shape(), a.shape() + a.ndim());
  return torch::from_blob(const_cast<float*>(a.data()), shape, torch::kFloat32).clone();
}

FloatArray to_array(const torch::Tensor& t) {
  auto c = t.detach().to(torch::kFloat32).contiguous();
  std::vector<py::ssize_t> shape(c.sizes().begin(), c.sizes().end());
  FloatArray out(shape);
  std::memcpy(out.mutable_data(), c.data_ptr<float>(), sizeof(float) * c.numel());
  return out;
}

py::dict sample_dict(const Sample& s) {
  py::dict d;
  d["name"] = s.name;
  d["image"] = to_array(s.image.tensor());
  d["annotations"] = s.annotations;
  d["reference"] = s.reference.defined() ? py::object(to_array(s.reference)) : py::object(py::none());
  return d;
}

std::string box_repr(const BBox& b) {
  std::ostringstream os;
  os << "BBox(" << b.x1 << ", " << b.y1 << ", " << b.x2 << ", " << b.y2 << ")";
  return os.str();
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Low-light object detection with routed enhancement experts";

  py::register_exception<InvalidArgument>(m, "InvalidArgument", PyExc_ValueError);
  py::register_exception<ParseError>(m, "ParseError", PyExc_ValueError);
  py::register_exception<NumericalError>(m, "NumericalError", PyExc_ArithmeticError);
  py::register_exception<CorruptCheckpoint>(m, "CorruptCheckpoint", PyExc_RuntimeError);

  py::class_<BBox>(m, "BBox")
      .def(py::init<>())
      .def(py::init([](double x1, double y1, double x2, double y2) { return BBox{x1, y1, x2, y2}; }),
           py::arg("x1"), py::arg("y1"), py::arg("x2"), py::arg("y2"))
      .def_static("from_center", &BBox::from_center, py::arg("cx"), py::arg("cy"), py::arg("w"), py::arg("h"))
      .def_readwrite("x1", &BBox::x1)
      .def_readwrite("y1", &BBox::y1)
      .def_readwrite("x2", &BBox::x2)
      .def_readwrite("y2", &BBox::y2)
      .def_property_readonly("area", &BBox::area)
      .def("__eq__", [](const BBox& a, const BBox& b) { return a == b; })
      .def("__repr__", &box_repr);

  py::class_<Annotation>(m, "Annotation")
      .def(py::init([](const BBox& box, int class_id) { return Annotation{box, class_id}; }), py::arg("box"),
           py::arg("class_id"))
      .def_readwrite("box", &Annotation::box)
      .def_readwrite("class_id", &Annotation::class_id)
      .def("__eq__", [](const Annotation& a, const Annotation& b) { return a == b; })
      .def("__repr__", [](const Annotation& a) {
        return "Annotation(" + box_repr(a.box) + ", class_id=" + std::to_string(a.class_id) + ")";
      });

  py::class_<Detection>(m, "Detection")
      .def(py::init([](const BBox& box, int class_id, double score) { return Detection{box, class_id, score}; }),
           py::arg("box"), py::arg("class_id"), py::arg("score"))
      .def_readwrite("box", &Detection::box)
      .def_readwrite("class_id", &Detection::class_id)
      .def_readwrite("score", &Detection::score)
      .def("__eq__", [](const Detection& a, const Detection& b) { return a == b; })
      .def("__repr__", [](const Detection& d) {
        return "Detection(" + box_repr(d.box) + ", class_id=" + std::to_string(d.class_id) +
               ", score=" + std::to_string(d.score) + ")";
      });

  m.def("iou", &iou, py::arg("a"), py::arg("b"));
  m.def("ciou", &ciou, py::arg("a"), py::arg("b"));

  // Evaluation
  py::class_<ClassCounts>(m, "ClassCounts")
      .def_readonly("tp", &ClassCounts::tp)
      .def_readonly("fp", &ClassCounts::fp)
      .def_readonly("fn", &ClassCounts::fn)
      .def_readonly("num_gt", &ClassCounts::num_gt);

  py::class_<EvalResult>(m, "EvalResult")
      .def_readonly("per_class_ap", &EvalResult::per_class_ap)
      .def_readonly("map50", &EvalResult::map50)
      .def_readonly("precision", &EvalResult::precision)
      .def_readonly("recall", &EvalResult::recall)
      .def_readonly("counts", &EvalResult::counts)
      .def_readonly("conf_thresh", &EvalResult::conf_thresh)
      .def_readonly("iou_thresh", &EvalResult::iou_thresh)
      .def_readonly("pr_curves", &EvalResult::pr_curves)
      .def("to_json", &report_json)
      .def_static("from_json", &parse_report_json, py::arg("text"));

  m.def("match_detections", &match_detections, py::arg("detections"), py::arg("ground_truth"),
        py::arg("iou_thresh") = 0.5);
  m.def(
      "average_precision",
      [](const std::vector<std::pair<double, bool>>& scored, int64_t num_gt) {
        std::vector<ScoredFlag> flags;
        flags.reserve(scored.size());
        for (const auto& [score, tp] : scored) flags.push_back({score, tp});
        std::vector<std::pair<double, double>> curve;
        const double ap = average_precision(std::move(flags), num_gt, &curve);
        return py::make_tuple(ap, curve);
      },
      py::arg("scored"), py::arg("num_gt"),
      "AP of (score, is_tp) pairs; returns (ap, [(recall, precision), ...]).");
  m.def(
      "evaluate",
      [](const std::vector<std::vector<Detection>>& dets, const std::vector<std::vector<Annotation>>& gts,
         double iou_thresh, double conf_thresh) { return evaluate(dets, gts, EvalOptions{iou_thresh, conf_thresh}); },
      py::arg("detections"), py::arg("ground_truth"), py::arg("iou_thresh") = 0.5, py::arg("conf_thresh") = 0.25);

  // Expert selection
  m.def(
      "select_best", [](const std::vector<double>& totals) { return select_best(totals); }, py::arg("totals"));
  m.def(
      "stage1_loss",
      [](double dgrl, const std::vector<double>& totals, double alpha) {
        return stage1_loss(dgrl, ExpertLossTable::from_totals(totals), alpha);
      },
      py::arg("dgrl"), py::arg("totals"), py::arg("alpha"));
  m.def(
      "dgrl_loss",
      [](const std::vector<FloatArray>& images, int best) {
        std::vector<Image> imgs;
        imgs.reserve(images.size());
        for (const auto& a : images) imgs.emplace_back(to_tensor(a));
        return dgrl_loss(imgs, best);
      },
      py::arg("images"), py::arg("best"), "Reconstruction loss of enhanced CHW images against images[best].");

  // Data
  m.def(
      "darken",
      [](const FloatArray& image, double gamma, double gain, double noise_sigma, uint64_t seed) {
        return to_array(darken(to_tensor(image), gamma, gain, noise_sigma, seed));
      },
      py::arg("image"), py::arg("gamma"), py::arg("gain"), py::arg("noise_sigma") = 0.0, py::arg("seed") = 0);
  m.def("parse_yolo_labels", &parse_yolo_labels, py::arg("text"), py::arg("image_width"), py::arg("image_height"),
        py::arg("num_classes"), py::arg("source") = "<labels>");
  m.def("shape_class_names", &shape_class_names);

  // Configuration
  py::class_<Config>(m, "Config")
      .def(py::init<>())
      .def_static("desk", &Config::desk)
      .def_static("load", &Config::load, py::arg("path"))
      .def_static("parse_text", &Config::parse_text, py::arg("text"), py::arg("source") = "<config>")
      .def("get", &Config::get, py::arg("key"))
      .def("set", &Config::set, py::arg("key"), py::arg("value"))
      .def("apply_override", &Config::apply_override, py::arg("assignment"))
      .def("set_seed", &Config::set_seed, py::arg("seed"))
      .def("validate", &Config::validate)
      .def("to_text", &Config::to_text)
      .def("to_dict",
           [](const Config& c) {
             std::map<std::string, std::string> out;
             const auto j = c.to_json();
             for (const auto& [k, v] : j.items()) out[k] = v.get<std::string>();
             return out;
           })
      .def_static("keys", [] {
        std::vector<std::pair<std::string, std::string>> out;
        for (const auto& k : Config::keys()) out.emplace_back(k.key, k.doc);
        return out;
      });

  m.def(
      "synth_generate",
      [](const Config& cfg) {
        py::list out;
        for (const auto& s : synth_generate(cfg.synth)) out.append(sample_dict(s));
        return out;
      },
      py::arg("config"), "Synthetic low-light samples as dicts (name, image, annotations, reference).");

  m.def(
      "run_cli",
      [](const std::vector<std::string>& args) {
        std::vector<std::string> argv{"amieod"};
        argv.insert(argv.end(), args.begin(), args.end());
        std::ostringstream out, err;
        int code = 0;
        {
          py::gil_scoped_release release;
          code = cli::run(argv, out, err);
        }
        return py::make_tuple(code, out.str(), err.str());
      },
      py::arg("args"), "Runs the command-line tool in-process; returns (exit_code, stdout, stderr).");
}

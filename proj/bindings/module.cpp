#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "protodet/aggregation.hpp"
#include "protodet/coupling.hpp"
#include "protodet/detector.hpp"
#include "protodet/evalmetrics.hpp"
#include "protodet/gradcheck.hpp"
#include "protodet/pipeline.hpp"
#include "protodet/shapeworld.hpp"

namespace py = pybind11;
using namespace protodet;

namespace {

using DoubleArray = py::array_t<double, py::array::c_style | py::array::forcecast>;

Tensor tensor_from_array(const DoubleArray& array, bool requires_grad) {
    Shape shape;
    for (py::ssize_t i = 0; i < array.ndim(); ++i)
        shape.push_back(static_cast<int>(array.shape(i)));
    std::vector<double> data(array.data(), array.data() + array.size());
    Tensor t = Tensor::from_data(std::move(shape), std::move(data));
    t.set_requires_grad(requires_grad);
    return t;
}

py::array_t<double> array_from(const Shape& shape, const std::vector<double>& data) {
    std::vector<py::ssize_t> dims(shape.begin(), shape.end());
    py::array_t<double> out(dims);
    std::copy(data.begin(), data.end(), out.mutable_data());
    return out;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "dense f64 tensors with reverse-mode autodiff plus the few-shot "
              "detection pipeline built on them";

    py::class_<Tensor>(m, "Tensor")
        .def(py::init([](const DoubleArray& array, bool requires_grad) {
                 return tensor_from_array(array, requires_grad);
             }),
             py::arg("array"), py::arg("requires_grad") = false)
        .def_property_readonly("shape", [](const Tensor& t) { return t.shape(); })
        .def_property("requires_grad", &Tensor::requires_grad,
                      [](Tensor& t, bool v) { t.set_requires_grad(v); })
        .def("numpy", [](const Tensor& t) { return array_from(t.shape(), t.data()); })
        .def("grad",
             [](const Tensor& t) {
                 return array_from(t.shape(), t.has_grad() ? t.grad()
                                                           : std::vector<double>(t.numel(), 0.0));
             })
        .def("item", &Tensor::item)
        .def("backward", &Tensor::backward)
        .def("zero_grad", &Tensor::zero_grad)
        .def("detach", &Tensor::detach)
        .def("__repr__", [](const Tensor& t) {
            return "Tensor(shape=" + shape_str(t.shape()) + ")";
        });

    m.def("matmul", &matmul);
    m.def("transpose", &transpose);
    m.def("softmax", &softmax, py::arg("x"), py::arg("axis"));
    m.def("conv2d", &conv2d);
    m.def("gap", &gap);
    m.def("gmp", &gmp);
    m.def("cosine_map", &cosine_map, py::arg("v"), py::arg("x"), py::arg("eps") = 1e-8);
    m.def("add", &add);
    m.def("hadamard", &hadamard);
    m.def("scale", &scale);
    m.def("sigmoid", &sigmoid);
    m.def("relu", &relu);
    m.def("l2_normalize", &l2_normalize, py::arg("x"), py::arg("eps") = 1e-8);
    m.def("linear", &linear);
    m.def("cross_entropy", &cross_entropy);
    m.def("l1_loss", &l1_loss);

    m.def("coupling_forward",
          [](const Tensor& x_q, const Tensor& x_s, int embed_dim, uint64_t seed,
             bool use_condition) {
              Rng rng(seed);
              CouplingParams params = CouplingParams::init(x_q.dim(0), embed_dim, rng);
              CoupledFeature out = coupling_forward(x_q, x_s, params, use_condition);
              return py::make_tuple(out.feature, out.condition, out.attention);
          },
          py::arg("x_q"), py::arg("x_s"), py::arg("embed_dim") = 8, py::arg("seed") = 1,
          py::arg("use_condition") = true,
          "Coupling pass under freshly initialized projections; returns "
          "(feature, condition, attention).");

    m.def("intra_dam",
          [](const Tensor& feature, double alpha) {
              ImagePrototype p = intra_dam(feature, alpha);
              return py::make_tuple(p.v, p.weights);
          },
          py::arg("feature"), py::arg("alpha") = 1.0);

    m.def("inter_dam",
          [](const std::vector<Tensor>& prototypes, uint64_t seed, bool normalize) {
              Rng rng(seed);
              InterDamParams params = InterDamParams::init(prototypes.at(0).dim(0), rng);
              std::vector<ImagePrototype> protos;
              for (const auto& v : prototypes)
                  protos.push_back({v, Tensor::full({1, 1}, 1.0), 0});
              ClassPrototype cp = inter_dam(protos, params, normalize);
              std::vector<double> contributions;
              for (const auto& c : cp.contributions) contributions.push_back(c.item());
              return py::make_tuple(cp.v, contributions);
          },
          py::arg("prototypes"), py::arg("seed") = 1, py::arg("normalize") = false);

    m.def("iou", [](const std::array<double, 4>& a, const std::array<double, 4>& b) {
        return iou(Box{a[0], a[1], a[2], a[3]}, Box{b[0], b[1], b[2], b[3]});
    });

    m.def("voc_ap",
          [](const std::vector<std::tuple<double, int, std::array<double, 4>>>& detections,
             const std::map<int, std::vector<std::array<double, 4>>>& gts) {
              std::vector<ScoredBox> dets;
              for (const auto& [score, image, b] : detections)
                  dets.push_back({score, image, Box{b[0], b[1], b[2], b[3]}});
              std::map<int, std::vector<Box>> gt_boxes;
              for (const auto& [image, boxes] : gts)
                  for (const auto& b : boxes)
                      gt_boxes[image].push_back(Box{b[0], b[1], b[2], b[3]});
              return voc_ap(dets, gt_boxes);
          },
          py::arg("detections"), py::arg("ground_truths"),
          "All-point interpolated AP over (score, image_id, box) detections.");

    m.def("run_grad_check",
          [](const std::string& scope) {
              GradCheckReport report = run_grad_check_suite(parse_grad_scope(scope));
              return py::make_tuple(report.ok(), report.summary(), report.max_rel_error);
          },
          py::arg("scope") = "ops");

    m.def("run",
          [](const std::string& subcommand, const std::map<std::string, std::string>& options) {
              RunConfig config;
              for (const auto& [key, value] : options) {
                  const size_t dot = key.find('.');
                  if (dot == std::string::npos)
                      throw std::invalid_argument("option key must be section.key, got '" + key +
                                                  "'");
                  config.set(key.substr(0, dot), key.substr(dot + 1), value);
              }
              if (subcommand == "gen-data")
                  run_gen_data(config);
              else if (subcommand == "meta-train")
                  run_meta_train(config);
              else if (subcommand == "finetune")
                  run_finetune(config);
              else if (subcommand == "eval")
                  run_eval(config);
              else if (subcommand == "ablate")
                  run_ablate(config);
              else if (subcommand == "gradcheck")
                  return run_gradcheck(config);
              else if (subcommand == "dump-viz")
                  run_dump_viz(config);
              else
                  throw std::invalid_argument("unknown subcommand '" + subcommand + "'");
              return true;
          },
          py::arg("subcommand"), py::arg("options") = std::map<std::string, std::string>{},
          "Drive a pipeline stage with --section.key style options.");

    m.def("shape_name", &shape_name);
    m.attr("__version__") = "0.1.0";
}

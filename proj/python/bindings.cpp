#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <cstring>

#include "nictkit/error.hpp"
#include "nictkit/geometry.hpp"
#include "nictkit/gradcheck.hpp"
#include "nictkit/losses.hpp"
#include "nictkit/metrics.hpp"
#include "nictkit/mitnet.hpp"
#include "nictkit/nict_sim.hpp"
#include "nictkit/phantom.hpp"
#include "nictkit/pipeline.hpp"

namespace py = pybind11;
using namespace nictkit;

using Array = py::array_t<float, py::array::c_style | py::array::forcecast>;

namespace {

Image to_image(const Array& a) {
    if (a.ndim() != 2) throw ShapeMismatch("expected a 2-D array, got " + std::to_string(a.ndim()) + "-D");
    Image img(a.shape(0), a.shape(1));
    std::memcpy(img.values.data(), a.data(), img.values.size() * sizeof(float));
    return img;
}

Array to_array(const std::vector<float>& v, std::size_t rows, std::size_t cols) {
    Array out({rows, cols});
    std::memcpy(out.mutable_data(), v.data(), v.size() * sizeof(float));
    return out;
}

Array to_array(const Image& img) { return to_array(img.values, img.height, img.width); }

Sinogram to_sinogram(const Array& a, const ProjectionGeometry& geom) {
    if (a.ndim() != 2 || std::size_t(a.shape(0)) != geom.num_views || std::size_t(a.shape(1)) != geom.num_detectors)
        throw ShapeMismatch("sinogram must be (" + std::to_string(geom.num_views) + ", " +
                            std::to_string(geom.num_detectors) + ")");
    Sinogram s(geom);
    std::memcpy(s.values.data(), a.data(), s.values.size() * sizeof(float));
    return s;
}

std::span<const float> span_of(const Array& a) { return {a.data(), std::size_t(a.size())}; }

}  // namespace

PYBIND11_MODULE(_nictkit, m) {
    m.doc() = "CT enhancement toolkit: projector, NICT simulation, MITNet inference and metrics.";

    static py::exception<Error> base(m, "Error", PyExc_RuntimeError);
#define NK_EXC(Name) static py::exception<Name> exc_##Name(m, #Name, base.ptr())
    NK_EXC(InvalidGeometry);
    NK_EXC(ShapeMismatch);
    NK_EXC(InvalidStride);
    NK_EXC(InvalidRange);
    NK_EXC(IoError);
    NK_EXC(CorruptVolume);
    NK_EXC(NonFiniteValue);
    NK_EXC(InvalidConfig);
    NK_EXC(ImageTooSmall);
    NK_EXC(IncompleteTable);
    NK_EXC(UnpairedFile);
#undef NK_EXC
    py::register_exception_translator([](std::exception_ptr p) {
        try {
            if (p) std::rethrow_exception(p);
        } catch (const Error& e) {
            const std::string kind = e.kind();
            py::object mod = py::module_::import("nictkit._nictkit");
            py::object cls = py::hasattr(mod, kind.c_str()) ? mod.attr(kind.c_str()) : mod.attr("Error");
            PyErr_SetString(cls.ptr(), e.what());
        }
    });

    py::class_<ProjectionGeometry>(m, "Geometry")
        .def_readonly("num_views", &ProjectionGeometry::num_views)
        .def_readonly("num_detectors", &ProjectionGeometry::num_detectors)
        .def_readonly("angle_start_deg", &ProjectionGeometry::angle_start_deg)
        .def_readonly("angle_range_deg", &ProjectionGeometry::angle_range_deg)
        .def_readonly("detector_spacing", &ProjectionGeometry::detector_spacing)
        .def_readonly("view_angles_deg", &ProjectionGeometry::view_angles_deg)
        .def("__repr__", [](const ProjectionGeometry& g) {
            return "Geometry(views=" + std::to_string(g.num_views) + ", detectors=" + std::to_string(g.num_detectors) +
                   ", range=" + std::to_string(g.angle_range_deg) + ")";
        });

    m.def("make_geometry", &make_geometry, py::arg("num_views"), py::arg("num_detectors"),
          py::arg("angle_start_deg") = 0.0, py::arg("angle_range_deg") = 180.0, py::arg("detector_spacing") = 1.0);
    m.def("default_geometry", &default_geometry, py::arg("side"), py::arg("num_views") = 720);

    m.def(
        "forward_project",
        [](const Array& image, const ProjectionGeometry& geom) {
            const auto s = forward_project(to_image(image), geom);
            return to_array(s.values, geom.num_views, geom.num_detectors);
        },
        py::arg("image"), py::arg("geometry"));
    m.def(
        "back_project",
        [](const Array& sino, const ProjectionGeometry& geom, std::size_t side) {
            return to_array(back_project(to_sinogram(sino, geom), side));
        },
        py::arg("sinogram"), py::arg("geometry"), py::arg("side") = 0);
    m.def(
        "fbp",
        [](const Array& sino, const ProjectionGeometry& geom, const std::string& window, std::size_t side) {
            return to_array(fbp(to_sinogram(sino, geom), parse_window(window), side));
        },
        py::arg("sinogram"), py::arg("geometry"), py::arg("window") = "ramlak", py::arg("side") = 0);

    m.def("shepp_logan", [](std::size_t side) { return to_array(shepp_logan(side)); }, py::arg("side"));
    m.def(
        "random_phantom", [](std::size_t side, std::uint64_t seed) { return to_array(random_phantom(side, seed)); },
        py::arg("side"), py::arg("seed"));

    m.def(
        "simulate",
        [](const Array& hu, const std::string& kind, const std::string& degree, std::uint64_t seed) {
            const auto p = simulate_nict(ingest_hu(to_image(hu)), defect_preset(parse_kind(kind), parse_degree(degree)),
                                         seed);
            return py::make_tuple(to_array(p.nict), to_array(p.ict));
        },
        py::arg("image_hu"), py::arg("kind"), py::arg("degree") = "mid", py::arg("seed") = 0,
        "Returns (nict, ict) reconstructions in HU.");

    m.def(
        "psnr", [](const Array& p, const Array& r, double range) { return psnr(span_of(p), span_of(r), range); },
        py::arg("pred"), py::arg("ref"), py::arg("data_range_hu") = kDataRangeHu);
    m.def(
        "rmse_hu", [](const Array& p, const Array& r) { return rmse_hu(span_of(p), span_of(r)); }, py::arg("pred"),
        py::arg("ref"));
    m.def(
        "ssim_pct", [](const Array& p, const Array& r) { return ssim_pct(to_image(p), to_image(r)); },
        py::arg("pred"), py::arg("ref"));

    m.def(
        "ddel_total",
        [](double mse, double ssim, double perc, double proj, std::vector<double> w) {
            if (w.size() != 4) throw InvalidConfig("weights need 4 entries");
            DdelWeights dw{w[0], w[1], w[2], w[3]};
            dw.validate();
            return weighted_total(dw, mse, ssim, perc, proj);
        },
        py::arg("l_mse_img"), py::arg("l_ssim"), py::arg("l_perc"), py::arg("l_mse_proj"),
        py::arg("weights") = std::vector<double>{1.0, 5e-3, 1e-4, 5e-4});

    m.def(
        "reader_metrics",
        [](const std::string& csv) {
            py::dict out;
            for (const auto& [method, s] : reader_metrics(parse_reader_csv(csv))) {
                py::dict d;
                d["pbn_pct"] = s.pbn_pct;
                d["sqr"] = s.sqr;
                d["pca_pct"] = s.pca_pct;
                out[py::str(method)] = d;
            }
            return out;
        },
        py::arg("csv_text"));

    m.def(
        "gradcheck",
        [](double tolerance) {
            auto cases = ad::kernel_grad_cases();
            for (auto& c : loss_grad_cases()) cases.push_back(std::move(c));
            py::list out;
            for (const auto& r : ad::run_grad_cases(cases, tolerance)) {
                py::dict d;
                d["name"] = r.name;
                d["max_rel_error"] = r.result.max_rel_error;
                d["passed"] = r.passed;
                d["error"] = r.error;
                out.append(d);
            }
            return out;
        },
        py::arg("tolerance") = 1e-2);

    py::class_<ModelBundle>(m, "Model")
        .def_static(
            "tiny", [](std::uint64_t seed) { return ModelBundle{mitnet_tiny(), init_mitnet(mitnet_tiny(), seed)}; },
            py::arg("seed") = 0)
        .def_static("load", [](const std::string& ckpt) { return load_model(ckpt); }, py::arg("checkpoint"))
        .def_property_readonly("param_count", [](const ModelBundle& b) { return mitnet_param_count(b.config); })
        .def_property_readonly("config", [](const ModelBundle& b) { return b.config.to_json().dump(); })
        .def(
            "enhance", [](const ModelBundle& b, const Array& hu) { return to_array(enhance_image(b, to_image(hu))); },
            py::arg("image_hu"));
}

#include <pybind11/functional.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "vitfl/cka.hpp"
#include "vitfl/config.hpp"
#include "vitfl/data.hpp"
#include "vitfl/error.hpp"
#include "vitfl/experiment.hpp"
#include "vitfl/fl.hpp"
#include "vitfl/partition.hpp"
#include "vitfl/verify.hpp"

namespace py = pybind11;
using namespace vitfl;

namespace {

using DoubleArray = py::array_t<double, py::array::c_style | py::array::forcecast>;

Matrix to_matrix(const DoubleArray& a) {
  if (a.ndim() != 2) throw ShapeError("expected a 2-D array, got " + std::to_string(a.ndim()) + "-D");
  const auto r = static_cast<std::size_t>(a.shape(0)), c = static_cast<std::size_t>(a.shape(1));
  return Matrix(r, c, std::vector<double>(a.data(), a.data() + r * c));
}

py::array_t<double> to_array(const Matrix& m) {
  py::array_t<double> out({m.rows(), m.cols()});
  std::copy(m.data().begin(), m.data().end(), out.mutable_data());
  return out;
}

std::vector<Matrix> to_matrices(const std::vector<DoubleArray>& xs) {
  std::vector<Matrix> out;
  for (const auto& x : xs) out.push_back(to_matrix(x));
  return out;
}

// dict name -> array  <->  ModelParams (all entries trainable, layer 0)
ModelParams to_params(const py::dict& d) {
  ModelParams p;
  for (const auto& [k, v] : d) {
    DoubleArray a = py::cast<DoubleArray>(v);
    Shape shape(a.shape(), a.shape() + a.ndim());
    p.push_back(NamedArray{py::cast<std::string>(k), shape,
                           std::vector<double>(a.data(), a.data() + a.size())});
  }
  return p;
}

py::dict from_params(const ModelParams& p) {
  py::dict d;
  for (const auto& e : p) {
    py::array_t<double> a(std::vector<py::ssize_t>(e.shape.begin(), e.shape.end()));
    std::copy(e.values.begin(), e.values.end(), a.mutable_data());
    d[py::str(e.name)] = a;
  }
  return d;
}

py::dict cka_to_dict(const CkaMatrix& m) {
  py::dict d;
  d["rows"] = m.rows;
  d["cols"] = m.cols;
  d["values"] = to_array(m.values);
  d["epoch_tag"] = m.epoch_tag;
  return d;
}

LabeledDataset labels_dataset(const std::vector<int>& labels, std::size_t num_classes) {
  std::vector<std::uint8_t> px(labels.size(), 0);
  return LabeledDataset::from_bytes(1, 1, 1, num_classes, std::move(px), labels, Provenance::Synthetic);
}

py::tuple dataset_arrays(const LabeledDataset& d) {
  py::array_t<float> x({d.size(), d.channels(), d.height(), d.width()});
  float* dst = x.mutable_data();
  std::vector<double> buf(d.sample_size());
  for (std::size_t i = 0; i < d.size(); ++i) {
    d.copy_features(i, buf);
    for (std::size_t j = 0; j < buf.size(); ++j) *dst++ = static_cast<float>(buf[j]);
  }
  py::array_t<int> y(static_cast<py::ssize_t>(d.size()));
  std::copy(d.labels().begin(), d.labels().end(), y.mutable_data());
  return py::make_tuple(x, y);
}

}  // namespace

PYBIND11_MODULE(_vitfl, m) {
  m.doc() = "Federated ViT/CNN simulation and CKA analysis";
  m.attr("__version__") = kArtifactVersion;

  auto base = py::register_exception<Error>(m, "Error");
  py::register_exception<ShapeError>(m, "ShapeError", base.ptr());
  py::register_exception<NumericError>(m, "NumericError", base.ptr());
  py::register_exception<FormatError>(m, "FormatError", base.ptr());
  py::register_exception<ConfigError>(m, "ConfigError", base.ptr());

  // Similarity
  m.def("gram_linear", [](const DoubleArray& x) { return to_array(gram_linear(to_matrix(x))); }, py::arg("x"));
  m.def("hsic1_unbiased",
        [](const DoubleArray& k, const DoubleArray& l) { return hsic1_unbiased(to_matrix(k), to_matrix(l)); },
        py::arg("k"), py::arg("l"));
  m.def("cka",
        [](const std::vector<DoubleArray>& xs, const std::vector<DoubleArray>& ys) {
          return cka(to_matrices(xs), to_matrices(ys));
        },
        py::arg("xs"), py::arg("ys"), "Minibatch linear CKA; None when undefined.");
  m.def("read_cka_csv", [](const std::filesystem::path& p) { return cka_to_dict(read_cka_csv(p)); }, py::arg("path"));

  // Federated learning
  m.def("fedavg_aggregate",
        [](const std::vector<py::dict>& params, const std::vector<double>& weights) {
          if (params.size() != weights.size()) throw Error("fedavg_aggregate: params and weights differ in length");
          std::vector<ModelParams> ps;
          for (const auto& d : params) ps.push_back(to_params(d));
          std::vector<std::pair<const ModelParams*, double>> u;
          for (std::size_t i = 0; i < ps.size(); ++i) u.emplace_back(&ps[i], weights[i]);
          return from_params(fedavg_aggregate(u));
        },
        py::arg("params"), py::arg("weights"));
  m.def("moon_loss",
        [](const DoubleArray& z, const DoubleArray& zg, const DoubleArray& zp, double tau) {
          auto t = [](const DoubleArray& a) {
            const Matrix mm = to_matrix(a);
            return Tensor::from({mm.rows(), mm.cols()}, {mm.data().begin(), mm.data().end()});
          };
          return moon_loss(t(z), t(zg), t(zp), tau).item();
        },
        py::arg("z"), py::arg("z_glob"), py::arg("z_prev"), py::arg("tau") = 0.5);

  // Data
  m.def("partition",
        [](const std::vector<int>& labels, std::size_t num_classes, std::size_t num_participants,
           const std::string& scenario, std::size_t labels_per_client, std::optional<std::size_t> volume,
           std::uint64_t seed, bool allow_overlap) {
          PartitionSpec spec;
          spec.scenario = scenario_from_string(scenario);
          spec.num_participants = num_participants;
          spec.labels_per_client = labels_per_client;
          spec.per_client_volume = volume;
          spec.seed = seed;
          spec.allow_overlap = allow_overlap;
          std::vector<std::vector<std::size_t>> out;
          for (auto& s : partition(labels_dataset(labels, num_classes), spec)) out.push_back(std::move(s.indices));
          return out;
        },
        py::arg("labels"), py::arg("num_classes"), py::arg("num_participants"), py::arg("scenario") = "S1",
        py::arg("labels_per_client") = 4, py::arg("per_client_volume") = py::none(), py::arg("seed") = 0,
        py::arg("allow_overlap") = true, "Client index lists for a label vector.");
  m.def("load_cifar10",
        [](const std::vector<std::filesystem::path>& paths) { return dataset_arrays(load_cifar10(paths)); },
        py::arg("paths"), "(images [n,3,32,32] float32 in [0,1], labels int32)");
  m.def("generate_synthetic",
        [](std::size_t num_classes, std::size_t per_class, std::uint64_t seed, std::size_t channels,
           std::size_t height, std::size_t width) {
          SyntheticSpec s;
          s.num_classes = num_classes;
          s.per_class = per_class;
          s.seed = seed;
          s.channels = channels;
          s.height = height;
          s.width = width;
          return dataset_arrays(generate_synthetic(s));
        },
        py::arg("num_classes") = 10, py::arg("per_class") = 100, py::arg("seed") = 0, py::arg("channels") = 3,
        py::arg("height") = 32, py::arg("width") = 32);

  // Experiments
  m.def("normalize_config", [](const std::string& text) { return serialize_config(parse_config(text)); },
        py::arg("text"), "Parse a config and print it with every default filled in.");
  m.def("config_hash", [](const std::string& text) { return config_hash(parse_config(text)); }, py::arg("text"));
  m.def("run",
        [](const std::string& text, std::optional<std::size_t> stop_after,
           std::function<void(std::size_t, double)> on_round) {
          RunOptions opts;
          opts.stop_after = stop_after;
          if (on_round)
            opts.on_round = [&](const RoundReport& r) {
              py::gil_scoped_acquire gil;
              on_round(r.round, r.server_accuracy);
            };
          const ExperimentConfig cfg = parse_config(text);
          RunResult r;
          {
            py::gil_scoped_release release;
            r = cmd_run(cfg, opts);
          }
          py::dict d;
          d["dir"] = r.dir;
          d["rounds_completed"] = r.rounds_completed;
          d["complete"] = r.complete;
          d["aborted"] = r.aborted;
          d["abort_reason"] = r.abort_reason;
          d["final_server_accuracy"] = r.final_server_accuracy;
          return d;
        },
        py::arg("config"), py::arg("stop_after") = py::none(), py::arg("on_round") = nullptr,
        "Run or resume the experiment described by a config text.");
  m.def("analyze",
        [](const std::filesystem::path& dir, const std::vector<std::size_t>& epochs, const std::string& layer) {
          AnalyzeOptions opts;
          opts.epochs = epochs;
          opts.overall_layer = layer;
          AnalyzeResult r;
          {
            py::gil_scoped_release release;
            r = cmd_analyze(dir, opts);
          }
          py::dict d;
          d["files"] = r.files;
          d["mean_same_layer"] = r.mean_same_layer;
          return d;
        },
        py::arg("run_dir"), py::arg("epochs") = std::vector<std::size_t>{}, py::arg("layer") = "");
  m.def("verify",
        [](const std::vector<std::string>& suites, std::size_t seeds) {
          VerifyOptions o;
          o.suites = suites;
          o.gradient_seeds = seeds;
          VerifyReport r;
          {
            py::gil_scoped_release release;
            r = run_verification(o);
          }
          py::list out;
          for (const auto& s : r.suites) {
            py::dict d;
            d["suite"] = s.name;
            d["checks"] = s.checks;
            d["failures"] = s.failures;
            d["skipped"] = s.skipped;
            d["messages"] = s.messages;
            d["passed"] = s.passed();
            out.append(d);
          }
          return out;
        },
        py::arg("suites") = std::vector<std::string>{}, py::arg("gradient_seeds") = 20);
}

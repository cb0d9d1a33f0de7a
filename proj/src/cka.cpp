#include "vitfl/cka.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>

#include "vitfl/error.hpp"
#include "vitfl/rng.hpp"

namespace vitfl {

namespace {
std::atomic<double> g_coef_delta{0.0};
}

namespace testing {
void set_hsic_coefficient_perturbation(double delta) { g_coef_delta = delta; }
double hsic_coefficient_perturbation() { return g_coef_delta; }
}  // namespace testing

Matrix gram_linear(const Matrix& x) {
  const std::size_t m = x.rows(), p = x.cols();
  if (m < 4) throw ShapeError("gram_linear: need at least 4 examples, got " + std::to_string(m));
  Matrix k(m, m);
  for (std::size_t i = 0; i < m; ++i) {
    const auto xi = x.row(i);
    for (std::size_t j = i; j < m; ++j) {
      const auto xj = x.row(j);
      double s = 0.0;
      for (std::size_t t = 0; t < p; ++t) s += xi[t] * xj[t];
      k(i, j) = s;
      k(j, i) = s;
    }
  }
  return k;
}

double hsic1_unbiased(const Matrix& k, const Matrix& l) {
  const std::size_t n = k.rows();
  if (k.cols() != n || l.rows() != n || l.cols() != n)
    throw ShapeError("hsic1_unbiased: Gram matrices must be square and of equal size");
  if (n < 4) throw ShapeError("hsic1_unbiased: need n >= 4, got " + std::to_string(n));

  std::vector<double> rk(n, 0.0), rl(n, 0.0);
  double trace = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      if (i == j) continue;
      rk[i] += k(i, j);
      rl[i] += l(i, j);
      trace += k(i, j) * l(i, j);
    }
  }
  double sk = 0.0, sl = 0.0, cross = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    sk += rk[i];
    sl += rl[i];
    cross += rk[i] * rl[i];
  }
  const double nd = static_cast<double>(n);
  const double coef = 2.0 / (nd - 2.0) + g_coef_delta.load();
  return (trace + sk * sl / ((nd - 1.0) * (nd - 2.0)) - coef * cross) / (nd * (nd - 3.0));
}

void CkaAccumulator::add(const Matrix& x, const Matrix& y) {
  if (x.rows() != y.rows())
    throw ShapeError("cka: activation matrices have " + std::to_string(x.rows()) + " and " +
                     std::to_string(y.rows()) + " examples");
  add_grams(gram_linear(x), gram_linear(y));
}

void CkaAccumulator::add_grams(const Matrix& k, const Matrix& l) {
  add_terms(hsic1_unbiased(k, l), hsic1_unbiased(k, k), hsic1_unbiased(l, l));
}

void CkaAccumulator::add_terms(double xy, double xx, double yy) {
  xy_ += xy;
  xx_ += xx;
  yy_ += yy;
  ++k_;
}

std::optional<double> CkaAccumulator::finalize() const {
  if (k_ == 0) return std::nullopt;
  const double kd = static_cast<double>(k_);
  const double mxx = xx_ / kd, myy = yy_ / kd;
  if (!(mxx > 0) || !(myy > 0)) return std::nullopt;
  return (xy_ / kd) / (std::sqrt(mxx) * std::sqrt(myy));
}

std::optional<double> cka(const std::vector<Matrix>& xs, const std::vector<Matrix>& ys) {
  if (xs.size() != ys.size()) throw ShapeError("cka: minibatch streams differ in length");
  CkaAccumulator acc;
  for (std::size_t i = 0; i < xs.size(); ++i) acc.add(xs[i], ys[i]);
  return acc.finalize();
}

std::vector<std::vector<std::size_t>> build_probe_minibatches(const LabeledDataset& validation,
                                                              std::size_t per_class, std::size_t k,
                                                              std::uint64_t seed) {
  if (per_class == 0 || k == 0) throw ConfigError("analysis", "probe per_class and k must be positive");
  const auto by_class = validation.indices_by_class();
  for (std::size_t c = 0; c < by_class.size(); ++c)
    if (by_class[c].size() < per_class)
      throw ConfigError("analysis.probe_per_class",
                        "class " + std::to_string(c) + " has " + std::to_string(by_class[c].size()) +
                            " validation samples, fewer than " + std::to_string(per_class));
  Rng rng(derive_seed({seed, 0x9B0E}));
  std::vector<std::vector<std::size_t>> out(k);
  for (auto& batch : out) {
    for (const auto& pool : by_class) {
      auto shuffled = pool;
      rng.shuffle(shuffled);
      batch.insert(batch.end(), shuffled.begin(), shuffled.begin() + static_cast<std::ptrdiff_t>(per_class));
    }
  }
  return out;
}

bool CkaMatrix::defined(std::size_t r, std::size_t c) const { return !std::isnan(values(r, c)); }

namespace {

std::map<std::string, ActivationMatrix> capture(Model& worker, const ModelParams& params,
                                                const ProbeSet& probes, std::size_t b,
                                                const std::vector<std::string>& layers) {
  worker.load(params);
  NoGradGuard guard;
  return worker.forward_with_capture(probes.data->batch(probes.batches[b]), Mode::Eval, layers)
      .activations;
}

void check_probes(const ProbeSet& probes) {
  if (!probes.data || probes.batches.empty()) throw Error("cka analysis needs probe minibatches");
}

double finalized_or_nan(const CkaAccumulator& acc) {
  return acc.finalize().value_or(std::numeric_limits<double>::quiet_NaN());
}

}  // namespace

CkaMatrix same_layer_similarity(Model& worker, const std::vector<ModelParams>& clients,
                                const ModelParams& server, const ProbeSet& probes,
                                const std::vector<std::string>& layers,
                                const std::vector<std::string>& client_labels) {
  check_probes(probes);
  for (const auto& c : clients) server.require_compatible(c, "same_layer_similarity");
  CkaMatrix out;
  out.cols = layers;
  for (std::size_t c = 0; c < clients.size(); ++c)
    out.rows.push_back(c < client_labels.size() ? client_labels[c] : "client" + std::to_string(c));
  std::vector<CkaAccumulator> acc(clients.size() * layers.size());

  for (std::size_t b = 0; b < probes.batches.size(); ++b) {
    auto sa = capture(worker, server, probes, b, layers);
    std::vector<Matrix> ks;
    std::vector<double> self;
    for (const auto& l : layers) {
      ks.push_back(gram_linear(sa.at(l).values));
      self.push_back(hsic1_unbiased(ks.back(), ks.back()));
    }
    for (std::size_t c = 0; c < clients.size(); ++c) {
      auto ca = capture(worker, clients[c], probes, b, layers);
      for (std::size_t l = 0; l < layers.size(); ++l) {
        const Matrix kc = gram_linear(ca.at(layers[l]).values);
        acc[c * layers.size() + l].add_terms(hsic1_unbiased(kc, ks[l]), hsic1_unbiased(kc, kc), self[l]);
      }
    }
  }
  out.values = Matrix(clients.size(), layers.size());
  for (std::size_t c = 0; c < clients.size(); ++c)
    for (std::size_t l = 0; l < layers.size(); ++l)
      out.values(c, l) = finalized_or_nan(acc[c * layers.size() + l]);
  return out;
}

CkaMatrix cross_model_similarity(Model& worker, const std::vector<ModelParams>& models_a,
                                 const std::vector<ModelParams>& models_b, const std::string& layer,
                                 const ProbeSet& probes, const std::vector<std::string>& labels_a,
                                 const std::vector<std::string>& labels_b) {
  check_probes(probes);
  if (labels_a.size() != models_a.size() || labels_b.size() != models_b.size())
    throw Error("cross_model_similarity: one label per model is required");
  const ModelParams& ref = models_a.empty() ? models_b.front() : models_a.front();
  for (const auto& m : models_a) ref.require_compatible(m, "cross_model_similarity");
  for (const auto& m : models_b) ref.require_compatible(m, "cross_model_similarity");

  const std::size_t na = models_a.size(), nb = models_b.size();
  std::vector<CkaAccumulator> acc(na * nb);
  const std::vector<std::string> layers{layer};
  for (std::size_t b = 0; b < probes.batches.size(); ++b) {
    auto grams = [&](const std::vector<ModelParams>& ms, std::vector<Matrix>& ks, std::vector<double>& self) {
      for (const auto& m : ms) {
        ks.push_back(gram_linear(capture(worker, m, probes, b, layers).at(layer).values));
        self.push_back(hsic1_unbiased(ks.back(), ks.back()));
      }
    };
    std::vector<Matrix> ka, kb;
    std::vector<double> sa, sb;
    grams(models_a, ka, sa);
    grams(models_b, kb, sb);
    for (std::size_t i = 0; i < na; ++i)
      for (std::size_t j = 0; j < nb; ++j)
        acc[i * nb + j].add_terms(hsic1_unbiased(ka[i], kb[j]), sa[i], sb[j]);
  }
  CkaMatrix out;
  out.rows = labels_a;
  out.cols = labels_b;
  out.values = Matrix(na, nb);
  for (std::size_t i = 0; i < na; ++i)
    for (std::size_t j = 0; j < nb; ++j) out.values(i, j) = finalized_or_nan(acc[i * nb + j]);
  return out;
}

CkaMatrix layer_similarity(Model& worker, const ModelParams& a, const ModelParams& b,
                           const ProbeSet& probes, const std::vector<std::string>& layers) {
  check_probes(probes);
  a.require_compatible(b, "layer_similarity");
  const std::size_t n = layers.size();
  std::vector<CkaAccumulator> acc(n * n);
  for (std::size_t t = 0; t < probes.batches.size(); ++t) {
    auto xa = capture(worker, a, probes, t, layers);
    auto xb = capture(worker, b, probes, t, layers);
    std::vector<Matrix> ka, kb;
    std::vector<double> sa, sb;
    for (const auto& l : layers) {
      ka.push_back(gram_linear(xa.at(l).values));
      kb.push_back(gram_linear(xb.at(l).values));
      sa.push_back(hsic1_unbiased(ka.back(), ka.back()));
      sb.push_back(hsic1_unbiased(kb.back(), kb.back()));
    }
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j)
        acc[i * n + j].add_terms(hsic1_unbiased(ka[i], kb[j]), sa[i], sb[j]);
  }
  CkaMatrix out;
  out.rows = layers;
  out.cols = layers;
  out.values = Matrix(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) out.values(i, j) = finalized_or_nan(acc[i * n + j]);
  return out;
}

void write_cka_csv(const std::filesystem::path& path, const CkaMatrix& m) {
  if (m.values.rows() != m.rows.size() || m.values.cols() != m.cols.size())
    throw ShapeError("write_cka_csv: labels do not match the value grid");
  auto check_label = [](const std::string& s) {
    if (s.find_first_of(",\n\r") != std::string::npos)
      throw FormatError("CKA label '" + s + "' contains a comma or newline");
  };
  std::ostringstream os;
  os << "# epoch_tag=" << m.epoch_tag << "\n";
  for (const auto& c : m.cols) {
    check_label(c);
    os << "," << c;
  }
  os << "\n";
  char buf[64];
  for (std::size_t r = 0; r < m.rows.size(); ++r) {
    check_label(m.rows[r]);
    os << m.rows[r];
    for (std::size_t c = 0; c < m.cols.size(); ++c) {
      if (m.defined(r, c)) {
        std::snprintf(buf, sizeof buf, "%.17g", m.values(r, c));
        os << "," << buf;
      } else {
        os << ",UNDEFINED";
      }
    }
    os << "\n";
  }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw Error("cannot open '" + path.string() + "' for writing");
  f << os.str();
}

CkaMatrix read_cka_csv(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error("cannot open '" + path.string() + "'");
  auto split = [](const std::string& line) {
    std::vector<std::string> cells;
    std::string cell;
    std::istringstream is(line);
    while (std::getline(is, cell, ',')) cells.push_back(cell);
    if (!line.empty() && line.back() == ',') cells.emplace_back();
    return cells;
  };
  const std::string origin = path.string();
  std::string line;
  CkaMatrix m;
  if (!std::getline(f, line) || line.rfind("# epoch_tag=", 0) != 0)
    throw FormatError(origin + ": missing '# epoch_tag=' line");
  try {
    m.epoch_tag = std::stol(line.substr(12));
  } catch (const std::exception&) {
    throw FormatError(origin + ": bad epoch_tag");
  }
  if (!std::getline(f, line)) throw FormatError(origin + ": missing header row");
  auto header = split(line);
  if (header.empty() || !header[0].empty()) throw FormatError(origin + ": header must start with an empty cell");
  m.cols.assign(header.begin() + 1, header.end());
  std::vector<double> vals;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    auto cells = split(line);
    if (cells.size() != m.cols.size() + 1)
      throw FormatError(origin + ": row '" + cells[0] + "' has the wrong number of cells");
    m.rows.push_back(cells[0]);
    for (std::size_t i = 1; i < cells.size(); ++i) {
      if (cells[i] == "UNDEFINED") {
        vals.push_back(std::numeric_limits<double>::quiet_NaN());
        continue;
      }
      std::size_t used = 0;
      double v = 0;
      try {
        v = std::stod(cells[i], &used);
      } catch (const std::exception&) {
        used = 0;
      }
      if (used != cells[i].size()) throw FormatError(origin + ": bad value '" + cells[i] + "'");
      vals.push_back(v);
    }
  }
  m.values = Matrix(m.rows.size(), m.cols.size(), std::move(vals));
  return m;
}

std::string render_pgm(const CkaMatrix& m, std::size_t cell_px) {
  if (cell_px == 0) throw Error("render_pgm: cell size must be positive");
  const std::size_t w = m.values.cols() * cell_px, h = m.values.rows() * cell_px;
  std::string out = "P5\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const std::size_t r = y / cell_px, c = x / cell_px;
      unsigned char g = 0;
      if (m.defined(r, c))
        g = static_cast<unsigned char>(std::lround(255.0 * std::clamp(m.values(r, c), 0.0, 1.0)));
      out.push_back(static_cast<char>(g));
    }
  }
  return out;
}

void write_pgm(const std::filesystem::path& path, const CkaMatrix& m, std::size_t cell_px) {
  const std::string bytes = render_pgm(m, cell_px);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw Error("cannot open '" + path.string() + "' for writing");
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

}  // namespace vitfl

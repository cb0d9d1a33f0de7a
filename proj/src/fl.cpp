#include "vitfl/fl.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <exception>
#include <thread>

#include "vitfl/error.hpp"
#include "vitfl/ops.hpp"
#include "vitfl/rng.hpp"
#include "vitfl/summation.hpp"

namespace vitfl {

std::string to_string(Strategy s) {
  switch (s) {
    case Strategy::FedAvg: return "fedavg";
    case Strategy::Moon: return "moon";
    case Strategy::FedAla: return "fedala";
  }
  return "?";
}

Strategy strategy_from_string(const std::string& s) {
  if (s == "fedavg") return Strategy::FedAvg;
  if (s == "moon") return Strategy::Moon;
  if (s == "fedala") return Strategy::FedAla;
  throw ConfigError("fl.strategy", "unknown strategy '" + s + "' (expected fedavg, moon or fedala)");
}

void FLConfig::validate() const {
  if (rounds == 0) throw ConfigError("fl.rounds", "must be positive");
  if (client_epochs == 0) throw ConfigError("fl.client_epochs", "must be positive");
  if (batch_size == 0) throw ConfigError("fl.batch_size", "must be positive");
  if (threads == 0) throw ConfigError("fl.threads", "must be positive");
  optimizer.validate();
}

void MoonConfig::validate() const {
  if (!(temperature > 0) || !std::isfinite(temperature))
    throw ConfigError("moon.temperature", "must be positive");
  if (!(mu >= 0) || !std::isfinite(mu)) throw ConfigError("moon.mu", "must be non-negative");
}

void AlaConfig::validate() const {
  if (!(sample_percent > 0 && sample_percent <= 100))
    throw ConfigError("ala.sample_percent", "must be in (0, 100]");
  if (!(std_threshold > 0)) throw ConfigError("ala.std_threshold", "must be positive");
  if (!(learning_rate > 0) || !std::isfinite(learning_rate))
    throw ConfigError("ala.learning_rate", "must be positive");
  if (max_iterations == 0) throw ConfigError("ala.max_iterations", "must be positive");
}

Tensor moon_loss(const Tensor& z, const Tensor& z_glob, const Tensor& z_prev, double tau) {
  if (!(tau > 0)) throw Error("moon_loss: temperature must be positive");
  if (z.shape() != z_glob.shape() || z.shape() != z_prev.shape())
    throw ShapeError("moon_loss: representation shapes differ");
  Tensor pos = ops::scale(ops::cosine_rows(z, z_glob), 1.0 / tau);
  Tensor neg = ops::scale(ops::cosine_rows(z, z_prev), 1.0 / tau);
  std::vector<int> target(z.dim(0), 0);
  return ops::cross_entropy(ops::concat_cols({pos, neg}), target);
}

LocalResult local_train(Model& model, const ModelParams& start, const ClientShard& shard,
                        const LabeledDataset& data, const FLConfig& cfg, const MoonInputs* moon,
                        std::uint64_t stream_seed) {
  if (shard.indices.empty())
    throw Error("client " + std::to_string(shard.client_id) + " has an empty shard");
  model.load(start);
  Optimizer opt(cfg.optimizer);

  std::unique_ptr<Model> global_model, prev_model;
  if (moon) {
    global_model = model.clone();
    global_model->load(*moon->global);
    prev_model = model.clone();
    prev_model->load(*moon->previous);
  }

  LocalResult res;
  double loss_sum = 0.0;
  std::vector<std::size_t> order = shard.indices;
  for (std::size_t epoch = 0; epoch < cfg.client_epochs; ++epoch) {
    order = shard.indices;
    Rng rng(derive_seed({stream_seed, epoch}));
    rng.shuffle(order);
    for (std::size_t pos = 0; pos < order.size(); pos += cfg.batch_size) {
      const std::size_t len = std::min(cfg.batch_size, order.size() - pos);
      std::span<const std::size_t> idx(order.data() + pos, len);
      Tensor x = data.batch(idx);
      const std::vector<int> y = data.batch_labels(idx);

      model.zero_grad();
      Tensor loss;
      if (moon) {
        auto out = model.forward_both(x, Mode::Train);
        Tensor zg, zp;
        {
          NoGradGuard guard;
          zg = global_model->representation(x, Mode::Eval);
          zp = prev_model->representation(x, Mode::Eval);
        }
        loss = ops::add(ops::cross_entropy(out.logits, y),
                        ops::scale(moon_loss(out.representation, zg, zp, moon->config.temperature),
                                   moon->config.mu));
      } else {
        loss = ops::cross_entropy(model.forward(x, Mode::Train), y);
      }
      const double value = loss.item();
      loss.backward();
      opt.step(model.parameters());
      loss_sum += value * static_cast<double>(len);
      res.samples_seen += len;
      ++res.steps;
    }
  }
  res.mean_loss = loss_sum / static_cast<double>(res.samples_seen);
  res.params = model.snapshot();
  return res;
}

ModelParams fedavg_aggregate(const std::vector<std::pair<const ModelParams*, double>>& updates) {
  if (updates.empty()) throw Error("fedavg_aggregate: no updates");
  ExactSum total;
  for (const auto& [p, w] : updates) {
    if (!p) throw Error("fedavg_aggregate: null update");
    if (!(w >= 0) || !std::isfinite(w)) throw Error("fedavg_aggregate: weights must be finite and >= 0");
    updates.front().first->require_compatible(*p, "fedavg_aggregate");
    total.add(w);
  }
  const double d = total.value();
  if (!(d > 0)) throw Error("fedavg_aggregate: total weight is zero");

  std::vector<double> coef;
  for (const auto& u : updates) coef.push_back(u.second / d);

  ModelParams out = *updates.front().first;
  ExactSum acc;
  for (std::size_t e = 0; e < out.size(); ++e) {
    auto& dst = out[e].values;
    for (std::size_t i = 0; i < dst.size(); ++i) {
      double ref = (*updates[0].first)[e].values[i];
      for (const auto& u : updates) ref = std::min(ref, (*u.first)[e].values[i]);
      acc.clear();
      for (std::size_t n = 0; n < updates.size(); ++n)
        acc.add(coef[n] * ((*updates[n].first)[e].values[i] - ref));
      dst[i] = ref + acc.value();
    }
  }
  return out;
}

namespace {

bool is_ala_entry(const NamedArray& a, const AlaConfig& cfg) {
  return a.kind == ParamKind::Trainable && a.layer >= cfg.start_layer;
}

ModelParams ones_like_ala(const ModelParams& like, const AlaConfig& cfg) {
  ModelParams out;
  for (const auto& a : like)
    if (is_ala_entry(a, cfg)) out.push_back(NamedArray{a.name, a.shape, std::vector<double>(a.values.size(), 1.0), a.kind, a.layer});
  return out;
}

void blend(ModelParams& merged, const ModelParams& global, const ModelParams& local,
           const ModelParams& weights) {
  for (const auto& w : weights) {
    NamedArray& m = *merged.find(w.name);
    const auto& g = global.at(w.name).values;
    const auto& l = local.at(w.name).values;
    for (std::size_t i = 0; i < m.values.size(); ++i)
      m.values[i] = w.values[i] * g[i] + (1.0 - w.values[i]) * l[i];
  }
}

}  // namespace

ModelParams ala_adapt(Model& model, ClientState& state, const ModelParams& global,
                      const LabeledDataset& data, const AlaConfig& cfg, std::size_t batch_size,
                      std::uint64_t stream_seed, AlaReport* report) {
  if (state.shard.indices.empty())
    throw Error("ala_adapt: client " + std::to_string(state.client_id) + " has an empty shard");
  global.require_compatible(state.local_params, "ala_adapt");
  if (state.ala_weights.empty()) state.ala_weights = ones_like_ala(global, cfg);

  const ModelParams& local = state.local_params;
  ModelParams merged = global;
  blend(merged, global, local, state.ala_weights);
  AlaReport rep;
  rep.iterations = 0;
  if (!cfg.adapt_weights) {
    if (report) *report = rep;
    return merged;
  }

  std::vector<std::size_t> sample = state.shard.indices;
  Rng rng(derive_seed({stream_seed, 0xA1A}));
  rng.shuffle(sample);
  const auto count = static_cast<std::size_t>(
      std::ceil(cfg.sample_percent / 100.0 * static_cast<double>(sample.size())));
  sample.resize(std::clamp<std::size_t>(count, 1, sample.size()));

  // Position of each ALA entry inside the model's parameter list.
  std::vector<std::size_t> slot;
  auto params = model.parameters();
  for (const auto& w : state.ala_weights) {
    std::size_t k = 0;
    while (k < params.size() && params[k].name != w.name) ++k;
    if (k == params.size()) throw ShapeError("ala_adapt: model has no parameter '" + w.name + "'");
    slot.push_back(k);
  }

  rep.converged = false;
  for (std::size_t it = 0; it < cfg.max_iterations; ++it) {
    const ModelParams before = state.ala_weights;
    for (std::size_t pos = 0; pos < sample.size(); pos += batch_size) {
      const std::size_t len = std::min(batch_size, sample.size() - pos);
      std::span<const std::size_t> idx(sample.data() + pos, len);
      model.load(merged);
      model.zero_grad();
      Tensor loss = ops::cross_entropy(model.forward(data.batch(idx), Mode::Train),
                                       data.batch_labels(idx));
      loss.backward();
      for (std::size_t e = 0; e < state.ala_weights.size(); ++e) {
        NamedArray& w = state.ala_weights[e];
        const auto grad = params[slot[e]].value.grad();
        const auto& g = global.at(w.name).values;
        const auto& l = local.at(w.name).values;
        for (std::size_t i = 0; i < w.values.size(); ++i) {
          const double step = cfg.learning_rate * grad[i] * (g[i] - l[i]);
          w.values[i] = std::clamp(w.values[i] - step, 0.0, 1.0);
        }
      }
      blend(merged, global, local, state.ala_weights);
    }
    ++rep.iterations;

    ExactSum s1, s2;
    std::size_t n = 0;
    for (std::size_t e = 0; e < state.ala_weights.size(); ++e) {
      for (std::size_t i = 0; i < before[e].values.size(); ++i) {
        const double d = state.ala_weights[e].values[i] - before[e].values[i];
        s1.add(d);
        s2.add(d * d);
        ++n;
      }
    }
    double sd = 0.0;
    if (n > 0) {
      const double mean = s1.value() / static_cast<double>(n);
      sd = std::sqrt(std::max(0.0, s2.value() / static_cast<double>(n) - mean * mean));
    }
    if (sd < cfg.std_threshold) {
      rep.converged = true;
      break;
    }
  }
  if (report) *report = rep;
  return merged;
}

Evaluation evaluate(Model& model, const ModelParams& params, const LabeledDataset& data,
                    std::span<const std::size_t> indices) {
  Evaluation ev;
  if (indices.empty()) return ev;
  model.load(params);
  NoGradGuard guard;
  constexpr std::size_t kChunk = 256;
  std::size_t correct = 0;
  double loss_sum = 0.0;
  for (std::size_t pos = 0; pos < indices.size(); pos += kChunk) {
    const std::size_t len = std::min(kChunk, indices.size() - pos);
    auto idx = indices.subspan(pos, len);
    const auto y = data.batch_labels(idx);
    Tensor logits = model.forward(data.batch(idx), Mode::Eval);
    const std::size_t c = logits.dim(1);
    const auto v = logits.data();
    for (std::size_t r = 0; r < len; ++r) {
      const double* row = v.data() + r * c;
      std::size_t best = 0;
      for (std::size_t j = 1; j < c; ++j)
        if (row[j] > row[best]) best = j;
      if (static_cast<int>(best) == y[r]) ++correct;
    }
    loss_sum += ops::cross_entropy(logits, y).item() * static_cast<double>(len);
  }
  ev.samples = indices.size();
  ev.accuracy = static_cast<double>(correct) / static_cast<double>(ev.samples);
  ev.loss = loss_sum / static_cast<double>(ev.samples);
  return ev;
}

Evaluation evaluate(Model& model, const ModelParams& params, const LabeledDataset& data) {
  std::vector<std::size_t> all(data.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  return evaluate(model, params, data, all);
}

Federation::Federation(ModelSpec spec, FLConfig cfg, MoonConfig moon, AlaConfig ala,
                       const LabeledDataset& train, std::vector<ClientShard> shards,
                       const LabeledDataset& validation, std::uint64_t init_seed)
    : spec_(std::move(spec)),
      cfg_(std::move(cfg)),
      moon_(moon),
      ala_(ala),
      train_(train),
      validation_(validation) {
  cfg_.validate();
  moon_.validate();
  ala_.validate();
  if (shards.empty()) throw Error("federation needs at least one client");
  auto first = build_model(spec_, init_seed);
  server_ = first->snapshot();
  const std::size_t nworkers = std::min(cfg_.threads, shards.size());
  workers_.push_back(std::move(first));
  while (workers_.size() < nworkers) workers_.push_back(workers_.front()->clone());

  for (auto& shard : shards) {
    ClientState c;
    c.client_id = shard.client_id;
    c.local_params = server_;
    c.prev_round_params = server_;
    for (std::size_t i = 0; i < validation_.size(); ++i)
      if (std::find(shard.label_window.begin(), shard.label_window.end(), validation_.label(i)) !=
          shard.label_window.end())
        c.local_validation.push_back(i);
    c.shard = std::move(shard);
    clients_.push_back(std::move(c));
  }
}

void Federation::set_server_params(ModelParams p) {
  server_.require_compatible(p, "set_server_params");
  server_ = std::move(p);
}

ClientReport Federation::train_client(Model& worker, ClientState& c, std::size_t round,
                                      ModelParams& out) {
  using clock = std::chrono::steady_clock;
  const auto t0 = clock::now();
  ClientReport rep;
  rep.client_id = c.client_id;
  const std::uint64_t seed = derive_seed({cfg_.seed, 0xC11E, c.client_id, round});
  const ClientState backup = c;
  try {
    ModelParams start;
    if (cfg_.strategy == Strategy::FedAla) {
      AlaReport ar;
      start = ala_adapt(worker, c, server_, train_, ala_, cfg_.batch_size, derive_seed({seed, 1}), &ar);
      rep.ala_iterations = ar.iterations;
      rep.ala_converged = ar.converged;
    } else {
      start = server_;
    }
    MoonInputs mi{moon_, &server_, &c.prev_round_params};
    LocalResult res = local_train(worker, start, c.shard, train_, cfg_,
                                  cfg_.strategy == Strategy::Moon ? &mi : nullptr,
                                  derive_seed({seed, 2}));
    rep.loss = res.mean_loss;
    rep.samples_seen = res.samples_seen;
    rep.steps = res.steps;
    if (!c.local_validation.empty())
      rep.accuracy = evaluate(worker, res.params, validation_, c.local_validation).accuracy;
    c.local_params = res.params;
    if (cfg_.strategy == Strategy::Moon) c.prev_round_params = res.params;
    out = std::move(res.params);
  } catch (const Error& e) {
    c = backup;
    rep.failed = true;
    rep.error = e.what();
  }
  rep.wall_ms = std::chrono::duration<double, std::milli>(clock::now() - t0).count();
  return rep;
}

RoundReport Federation::run_round() {
  using clock = std::chrono::steady_clock;
  const auto t0 = clock::now();
  RoundReport report;
  report.round = rounds_completed_ + 1;
  const std::size_t n = clients_.size();
  std::vector<ModelParams> trained(n);
  report.clients.resize(n);

  std::atomic<std::size_t> next{0};
  std::vector<std::exception_ptr> errors(workers_.size());
  auto work = [&](std::size_t w) {
    try {
      for (std::size_t i = next++; i < n; i = next++)
        report.clients[i] = train_client(*workers_[w], clients_[i], report.round, trained[i]);
    } catch (...) {
      errors[w] = std::current_exception();
    }
  };
  if (workers_.size() == 1) {
    work(0);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers_.size(); ++w) pool.emplace_back(work, w);
    for (auto& t : pool) t.join();
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);

  std::vector<std::pair<const ModelParams*, double>> updates;
  for (std::size_t i = 0; i < n; ++i) {
    if (report.clients[i].failed) continue;
    updates.emplace_back(&trained[i], static_cast<double>(clients_[i].shard.size()));
    report.aggregated_samples += clients_[i].shard.size();
  }
  if (updates.empty())
    throw Error("round " + std::to_string(report.round) + ": every client failed");
  server_ = fedavg_aggregate(updates);

  const Evaluation ev = evaluate(*workers_.front(), server_, validation_);
  report.server_accuracy = ev.accuracy;
  report.server_loss = ev.loss;
  ++rounds_completed_;
  report.wall_ms = std::chrono::duration<double, std::milli>(clock::now() - t0).count();
  return report;
}

void Federation::save_state(Checkpoint& ck) const {
  ck.add_scalar("rounds_completed", static_cast<double>(rounds_completed_));
  ck.add_params("server/", server_);
  for (const auto& c : clients_) {
    const std::string p = "client/" + std::to_string(c.client_id) + "/";
    ck.add_params(p + "local/", c.local_params);
    if (cfg_.strategy == Strategy::Moon) ck.add_params(p + "prev/", c.prev_round_params);
    if (!c.ala_weights.empty()) ck.add_params(p + "ala/", c.ala_weights);
  }
}

void Federation::load_state(const Checkpoint& ck) {
  const ModelParams ala_like = ones_like_ala(server_, ala_);
  server_ = ck.params("server/", server_);
  rounds_completed_ = static_cast<std::size_t>(ck.scalar("rounds_completed"));
  for (auto& c : clients_) {
    const std::string p = "client/" + std::to_string(c.client_id) + "/";
    c.local_params = ck.params(p + "local/", server_);
    c.prev_round_params = cfg_.strategy == Strategy::Moon ? ck.params(p + "prev/", server_) : server_;
    c.ala_weights = ck.has_section(p + "ala/") ? ck.params(p + "ala/", ala_like) : ModelParams{};
  }
}

}  // namespace vitfl

#include "ttc/scoring.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <sstream>

#include "json.hpp"
#include "ttc/errors.hpp"

namespace ttc {

SelectionStrategy parse_selection_strategy(std::string_view name) {
  if (name == "tis") return SelectionStrategy::tis;
  if (name == "l2norm") return SelectionStrategy::l2norm;
  if (name == "random") return SelectionStrategy::random;
  throw ConfigError("unknown selector '" + std::string(name) + "'");
}

std::string_view selection_strategy_name(SelectionStrategy s) {
  switch (s) {
    case SelectionStrategy::tis:
      return "tis";
    case SelectionStrategy::l2norm:
      return "l2norm";
    case SelectionStrategy::random:
      return "random";
  }
  return "?";
}

ScoreMode parse_score_mode(std::string_view name) {
  if (name == "squared") return ScoreMode::squared;
  if (name == "signed") return ScoreMode::signed_sum;
  throw ConfigError("unknown score mode '" + std::string(name) + "'");
}

std::string_view score_mode_name(ScoreMode m) {
  return m == ScoreMode::squared ? "squared" : "signed";
}

const SiteScores* ImportanceReport::find(std::size_t layer,
                                         TtcPosition pos) const {
  for (const auto& s : sites)
    if (s.layer == layer && s.position == pos) return &s;
  return nullptr;
}

std::string ImportanceReport::to_json() const {
  nlohmann::json j;
  j["k"] = k;
  j["num_batches"] = num_batches;
  j["seed"] = seed;
  j["selector"] = selection_strategy_name(strategy);
  j["score_mode"] = score_mode_name(mode);
  j["sites"] = nlohmann::json::array();
  for (const auto& s : sites) {
    nlohmann::json js;
    js["layer"] = s.layer;
    js["position"] = std::string(ttc_position_name(s.position));
    js["scores"] = s.scores;
    js["selected"] = s.selected;
    j["sites"].push_back(std::move(js));
  }
  return j.dump(2);
}

ImportanceReport ImportanceReport::from_json(const std::string& text) {
  nlohmann::json j = nlohmann::json::parse(text, nullptr, false);
  if (j.is_discarded()) throw IoError("scores: invalid JSON");
  ImportanceReport r;
  try {
    r.k = j.at("k").get<std::size_t>();
    r.num_batches = j.at("num_batches").get<std::size_t>();
    r.seed = j.at("seed").get<std::uint64_t>();
    r.strategy =
        parse_selection_strategy(j.at("selector").get<std::string>());
    r.mode = parse_score_mode(j.at("score_mode").get<std::string>());
    for (const auto& js : j.at("sites")) {
      SiteScores s;
      s.layer = js.at("layer").get<std::size_t>();
      s.position = parse_ttc_position(js.at("position").get<std::string>());
      s.scores = js.at("scores").get<std::vector<double>>();
      s.selected = js.at("selected").get<std::vector<std::size_t>>();
      r.sites.push_back(std::move(s));
    }
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("scores: ") + e.what());
  }
  return r;
}

void ImportanceReport::save(const std::filesystem::path& path) const {
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream os(tmp, std::ios::trunc);
    if (!os) throw IoError("cannot write " + tmp.string());
    os << to_json() << "\n";
  }
  std::filesystem::rename(tmp, path);
}

ImportanceReport ImportanceReport::load(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  return from_json(ss.str());
}

std::vector<std::size_t> select_topk(std::span<const double> scores,
                                     std::size_t k) {
  if (k == 0 || k > scores.size())
    throw ConfigError("select_topk: k=" + std::to_string(k) + " out of [1," +
                      std::to_string(scores.size()) + "]");
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), 0);
  // ties break toward the lower index
  std::stable_sort(idx.begin(), idx.end(),
                   [&](std::size_t a, std::size_t b) {
                     if (scores[a] != scores[b]) return scores[a] > scores[b];
                     return a < b;
                   });
  idx.resize(k);
  std::sort(idx.begin(), idx.end());
  return idx;
}

// ---- generic core -----------------------------------------------------------

namespace {

std::pair<std::size_t, std::size_t> weight_dims(const Tensor& weight) {
  if (weight.rank() != 2)
    throw ShapeError("channel scoring needs a rank-2 weight, got " +
                     shape_str(weight.shape()));
  return {weight.dim(0), weight.dim(1)};
}

}  // namespace

std::vector<double> taylor_channel_scores(const LossFn& loss_fn,
                                          std::size_t num_batches,
                                          Tensor& weight, ScoreMode mode) {
  if (num_batches == 0)
    throw ConfigError("taylor_channel_scores: empty batch list");
  auto [in_width, channels] = weight_dims(weight);
  const bool was_trainable = weight.requires_grad();
  weight.set_requires_grad(true);
  std::vector<double> acc(channels, 0.0);
  for (std::size_t b = 0; b < num_batches; ++b) {
    weight.zero_grad();
    Tensor loss = loss_fn(b);
    if (loss.numel() != 1)
      throw ShapeError("taylor_channel_scores: loss must be scalar");
    loss.backward();
    auto g = weight.has_grad() ? weight.grad()
                               : std::span<const double>{};
    auto w = weight.data();
    for (std::size_t c = 0; c < channels; ++c) {
      double s = 0.0;
      for (std::size_t r = 0; r < in_width; ++r) {
        double gw = (g.empty() ? 0.0 : g[r * channels + c]) *
                    w[r * channels + c];
        s += mode == ScoreMode::squared ? gw * gw : gw;
      }
      acc[c] += s;
    }
  }
  weight.zero_grad();
  weight.set_requires_grad(was_trainable);
  for (double& v : acc) {
    v /= static_cast<double>(num_batches);
    if (!std::isfinite(v))
      throw NumericError("taylor_channel_scores: non-finite score");
  }
  return acc;
}

double exact_removal_score(const std::function<double()>& eval_loss,
                           Tensor& weight, std::size_t channel) {
  auto [in_width, channels] = weight_dims(weight);
  if (channel >= channels)
    throw ShapeError("exact_removal_score: channel " +
                     std::to_string(channel) + " out of " +
                     std::to_string(channels));
  const double baseline = eval_loss();
  std::vector<double> saved(in_width);
  auto w = weight.mutable_data();
  for (std::size_t r = 0; r < in_width; ++r) {
    saved[r] = w[r * channels + channel];
    w[r * channels + channel] = 0.0;
  }
  const double removed = eval_loss();
  for (std::size_t r = 0; r < in_width; ++r)
    w[r * channels + channel] = saved[r];
  const double delta = removed - baseline;
  return delta * delta;
}

std::vector<double> exact_removal_scores(
    const std::function<double()>& eval_loss, Tensor& weight) {
  auto [in_width, channels] = weight_dims(weight);
  const double baseline = eval_loss();
  std::vector<double> out(channels);
  auto w = weight.mutable_data();
  std::vector<double> saved(in_width);
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t r = 0; r < in_width; ++r) {
      saved[r] = w[r * channels + c];
      w[r * channels + c] = 0.0;
    }
    const double removed = eval_loss();
    for (std::size_t r = 0; r < in_width; ++r) w[r * channels + c] = saved[r];
    const double delta = removed - baseline;
    out[c] = delta * delta;
  }
  return out;
}

// ---- model-level ------------------------------------------------------------

double exact_removal_score(TransformerModel& model, const Tensor& images,
                           const std::vector<int>& labels,
                           const std::string& weight_name,
                           std::size_t channel) {
  Tensor& weight = model.param(weight_name);
  auto eval = [&]() {
    autograd::NoGradGuard ng;
    return softmax_crossentropy(model.forward(images).logits, labels).value();
  };
  return exact_removal_score(eval, weight, channel);
}

namespace {

struct BatchPlan {
  std::vector<std::vector<std::size_t>> batches;
};

BatchPlan plan_batches(std::size_t n, std::size_t batch_size,
                       std::size_t max_batches) {
  BatchPlan plan;
  for (std::size_t off = 0; off < n; off += batch_size) {
    std::vector<std::size_t> idx;
    for (std::size_t i = off; i < std::min(n, off + batch_size); ++i)
      idx.push_back(i);
    plan.batches.push_back(std::move(idx));
    if (max_batches && plan.batches.size() >= max_batches) break;
  }
  return plan;
}

}  // namespace

ImportanceReport compute_importance(const TransformerModel& model,
                                    const Dataset& train,
                                    const ScoringConfig& cfg) {
  if (train.size() == 0) throw ConfigError("scoring: empty training set");
  const std::size_t L = model.spec().depth;
  const std::size_t D = model.spec().dim;
  if (cfg.k == 0 || cfg.k > D)
    throw ConfigError("scoring: k=" + std::to_string(cfg.k) +
                      " out of [1," + std::to_string(D) + "]");
  if (!cfg.position_mhsa && !cfg.position_mlp)
    throw ConfigError("scoring: no insertion position enabled");
  const std::size_t depth = cfg.depth == 0 ? L : std::min(cfg.depth, L);
  const std::size_t first_layer = L - depth;

  std::vector<std::pair<std::size_t, TtcPosition>> site_list;
  for (std::size_t l = first_layer; l < L; ++l) {
    if (cfg.position_mhsa) site_list.emplace_back(l, TtcPosition::after_mhsa);
    if (cfg.position_mlp) site_list.emplace_back(l, TtcPosition::after_mlp);
  }

  ImportanceReport report;
  report.k = cfg.k;
  report.seed = cfg.seed;
  report.strategy = cfg.strategy;
  report.mode = cfg.mode;

  BatchPlan plan = plan_batches(train.size(), cfg.batch_size,
                                cfg.max_batches);
  report.num_batches = plan.batches.size();

  // scoring never mutates the caller's model state
  TransformerModel scratch = model.clone();

  if (cfg.strategy == SelectionStrategy::random) {
    for (auto [layer, pos] : site_list) {
      SplitRng rng = SplitRng(cfg.seed)
                         .split("random_select")
                         .split(layer)
                         .split(pos == TtcPosition::after_mhsa ? 0 : 1);
      std::vector<std::size_t> all(D);
      std::iota(all.begin(), all.end(), 0);
      rng.shuffle(all);
      all.resize(cfg.k);
      std::sort(all.begin(), all.end());
      SiteScores s;
      s.layer = layer;
      s.position = pos;
      s.scores.assign(D, 0.0);
      for (auto c : all) s.scores[c] = 1.0;  // selection indicator
      s.selected = std::move(all);
      report.sites.push_back(std::move(s));
    }
    return report;
  }

  if (cfg.strategy == SelectionStrategy::l2norm) {
    // accumulate per-channel feature norms from traced forwards
    std::vector<std::vector<double>> sq(site_list.size(),
                                        std::vector<double>(D, 0.0));
    autograd::NoGradGuard ng;
    for (const auto& batch : plan.batches) {
      ForwardResult fr =
          scratch.forward(train.images(batch), {.want_trace = true});
      for (std::size_t si = 0; si < site_list.size(); ++si) {
        auto [layer, pos] = site_list[si];
        const Tensor& feat = pos == TtcPosition::after_mhsa
                                 ? fr.trace[layer].after_mhsa
                                 : fr.trace[layer].after_mlp;
        auto fv = feat.data();
        const std::size_t rows = feat.numel() / D;
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t c = 0; c < D; ++c)
            sq[si][c] += fv[r * D + c] * fv[r * D + c];
      }
    }
    for (std::size_t si = 0; si < site_list.size(); ++si) {
      SiteScores s;
      s.layer = site_list[si].first;
      s.position = site_list[si].second;
      s.scores.resize(D);
      for (std::size_t c = 0; c < D; ++c) s.scores[c] = std::sqrt(sq[si][c]);
      s.selected = select_topk(s.scores, cfg.k);
      report.sites.push_back(std::move(s));
    }
    return report;
  }

  // TIS: one backward per batch covers every site's producing weight.
  std::vector<Tensor> weights;
  weights.reserve(site_list.size());
  for (auto [layer, pos] : site_list) {
    Tensor& w = scratch.param(scratch.producing_weight_name(layer, pos));
    w.set_requires_grad(true);
    weights.push_back(w);
  }
  std::vector<std::vector<double>> acc(site_list.size(),
                                       std::vector<double>(D, 0.0));
  for (const auto& batch : plan.batches) {
    scratch.zero_grad();
    Tensor loss = softmax_crossentropy(
        scratch.forward(train.images(batch)).logits,
        train.labels_at(batch));
    loss.backward();
    for (std::size_t si = 0; si < site_list.size(); ++si) {
      Tensor& w = weights[si];
      const std::size_t in_width = w.dim(0);
      auto g = w.grad();
      auto wd = w.data();
      for (std::size_t c = 0; c < D; ++c) {
        double s = 0.0;
        for (std::size_t r = 0; r < in_width; ++r) {
          double gw = g[r * D + c] * wd[r * D + c];
          s += cfg.mode == ScoreMode::squared ? gw * gw : gw;
        }
        acc[si][c] += s;
      }
    }
  }
  const double inv = 1.0 / static_cast<double>(plan.batches.size());
  for (std::size_t si = 0; si < site_list.size(); ++si) {
    SiteScores s;
    s.layer = site_list[si].first;
    s.position = site_list[si].second;
    s.scores.resize(D);
    for (std::size_t c = 0; c < D; ++c) {
      s.scores[c] = acc[si][c] * inv;
      if (!std::isfinite(s.scores[c]))
        throw NumericError("scoring: non-finite importance score");
    }
    s.selected = select_topk(s.scores, cfg.k);
    report.sites.push_back(std::move(s));
  }
  return report;
}

}  // namespace ttc

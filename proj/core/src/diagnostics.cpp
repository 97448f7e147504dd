#include "ttc/diagnostics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>

#include "ttc/errors.hpp"
#include "ttc/glob.hpp"
#include "ttc/ttc_module.hpp"

namespace ttc {

namespace {

void check_distribution(std::span<const double> p, const char* who) {
  double sum = 0.0;
  for (double v : p) {
    if (!std::isfinite(v) || v < 0.0)
      throw NumericError(std::string(who) + ": invalid probability value");
    sum += v;
  }
  if (std::abs(sum - 1.0) > 1e-8)
    throw NumericError(std::string(who) + ": distribution sums to " +
                       std::to_string(sum) + ", not 1");
}

double kl(std::span<const double> p, std::span<const double> m) {
  double acc = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] == 0.0) continue;  // 0*log(0) = 0
    acc += p[i] * std::log(p[i] / m[i]);
  }
  return acc;
}

std::string format_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

}  // namespace

double jsd(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size())
    throw ShapeError("jsd: support sizes differ (" +
                     std::to_string(p.size()) + " vs " +
                     std::to_string(q.size()) + ")");
  check_distribution(p, "jsd(p)");
  check_distribution(q, "jsd(q)");
  std::vector<double> m(p.size());
  for (std::size_t i = 0; i < p.size(); ++i) m[i] = 0.5 * (p[i] + q[i]);
  return 0.5 * (kl(p, m) + kl(q, m));
}

std::vector<double> softmax_distribution(std::span<const double> v) {
  if (v.empty()) throw ShapeError("softmax_distribution: empty vector");
  double mx = v[0];
  for (double x : v) mx = std::max(mx, x);
  std::vector<double> out(v.size());
  double z = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    out[i] = std::exp(v[i] - mx);
    z += out[i];
  }
  for (double& x : out) x /= z;
  return out;
}

std::vector<double> histogram_distribution(std::span<const double> v,
                                           double lo, double hi,
                                           std::size_t bins) {
  if (bins == 0 || hi <= lo)
    throw ConfigError("histogram_distribution: bad binning spec");
  std::vector<double> out(bins, 0.0);
  const double width = (hi - lo) / static_cast<double>(bins);
  for (double x : v) {
    double pos = (x - lo) / width;
    std::size_t b = pos <= 0.0 ? 0
                    : pos >= static_cast<double>(bins)
                        ? bins - 1
                        : static_cast<std::size_t>(pos);
    out[b] += 1.0;
  }
  // smoothing keeps KL terms finite on empty bins
  double total = 0.0;
  for (double& x : out) {
    x += 1e-12;
    total += x;
  }
  for (double& x : out) x /= total;
  return out;
}

std::string_view cls_distribution_mode_name(ClsDistributionMode m) {
  return m == ClsDistributionMode::softmax ? "softmax" : "histogram";
}

std::string FeatureShiftReport::to_csv() const {
  std::ostringstream os;
  os << "# mode=" << cls_distribution_mode_name(mode)
     << " samples=" << per_sample_jsd.size() << "\n";
  os << "bin_lo,bin_hi,count\n";
  const double width = hist_counts.empty()
                           ? 0.0
                           : (hist_hi - hist_lo) /
                                 static_cast<double>(hist_counts.size());
  for (std::size_t i = 0; i < hist_counts.size(); ++i)
    os << format_double(hist_lo + width * static_cast<double>(i)) << ","
       << format_double(hist_lo + width * static_cast<double>(i + 1)) << ","
       << hist_counts[i] << "\n";
  return os.str();
}

FeatureShiftReport feature_shift_report(const TransformerModel& model_a,
                                        const TransformerModel& model_b,
                                        const Dataset& data,
                                        ClsDistributionMode mode,
                                        std::size_t histogram_bins) {
  if (!(model_a.spec() == model_b.spec()))
    throw ConfigError("feature_shift_report: model specs differ");
  Tensor fa = extract_cls_features(model_a, data);
  Tensor fb = extract_cls_features(model_b, data);
  const std::size_t d = model_a.spec().dim;
  FeatureShiftReport report;
  report.mode = mode;
  report.per_sample_jsd.resize(data.size());
  auto va = fa.data();
  auto vb = fb.data();
  for (std::size_t i = 0; i < data.size(); ++i) {
    std::span<const double> ra(va.data() + i * d, d);
    std::span<const double> rb(vb.data() + i * d, d);
    std::vector<double> p, q;
    if (mode == ClsDistributionMode::softmax) {
      p = softmax_distribution(ra);
      q = softmax_distribution(rb);
    } else {
      double lo = ra[0], hi = ra[0];
      for (double x : ra) lo = std::min(lo, x), hi = std::max(hi, x);
      for (double x : rb) lo = std::min(lo, x), hi = std::max(hi, x);
      if (hi <= lo) hi = lo + 1.0;
      p = histogram_distribution(ra, lo, hi, 32);
      q = histogram_distribution(rb, lo, hi, 32);
    }
    report.per_sample_jsd[i] = jsd(p, q);
  }
  report.hist_lo = 0.0;
  report.hist_hi = std::log(2.0);
  report.hist_counts.assign(histogram_bins, 0);
  const double width =
      (report.hist_hi - report.hist_lo) / static_cast<double>(histogram_bins);
  for (double v : report.per_sample_jsd) {
    std::size_t b = v <= 0.0 ? 0
                    : v >= report.hist_hi
                        ? histogram_bins - 1
                        : static_cast<std::size_t>(v / width);
    ++report.hist_counts[b];
  }
  return report;
}

Tensor extract_cls_features(const TransformerModel& model, const Dataset& data,
                            std::size_t batch_size) {
  autograd::NoGradGuard ng;
  const std::size_t d = model.spec().dim;
  std::vector<double> out(data.size() * d);
  for (std::size_t off = 0; off < data.size(); off += batch_size) {
    std::vector<std::size_t> idx;
    for (std::size_t i = off; i < std::min(data.size(), off + batch_size);
         ++i)
      idx.push_back(i);
    Tensor cls = model.forward(data.images(idx)).cls;
    std::copy(cls.data().begin(), cls.data().end(),
              out.begin() + static_cast<std::ptrdiff_t>(off * d));
  }
  return Tensor::from_data({data.size(), d}, std::move(out));
}

double knn_probe(const Tensor& train_feats,
                 const std::vector<int>& train_labels,
                 const Tensor& test_feats,
                 const std::vector<int>& test_labels, std::size_t k) {
  if (train_feats.rank() != 2 || test_feats.rank() != 2 ||
      train_feats.dim(1) != test_feats.dim(1))
    throw ShapeError("knn_probe: feature shapes " +
                     shape_str(train_feats.shape()) + " vs " +
                     shape_str(test_feats.shape()));
  const std::size_t n_train = train_feats.dim(0);
  const std::size_t n_test = test_feats.dim(0);
  if (n_train == 0) throw ConfigError("knn_probe: empty train set");
  if (n_train != train_labels.size() || n_test != test_labels.size())
    throw ShapeError("knn_probe: label count mismatch");
  if (k == 0) throw ConfigError("knn_probe: k must be >= 1");
  k = std::min(k, n_train);
  const std::size_t d = train_feats.dim(1);
  auto tr = train_feats.data();
  auto te = test_feats.data();

  std::size_t correct = 0;
  std::vector<std::pair<double, std::size_t>> dist(n_train);
  for (std::size_t i = 0; i < n_test; ++i) {
    for (std::size_t j = 0; j < n_train; ++j) {
      double acc = 0.0;
      for (std::size_t c = 0; c < d; ++c) {
        double diff = te[i * d + c] - tr[j * d + c];
        acc += diff * diff;
      }
      dist[j] = {acc, j};
    }
    std::partial_sort(dist.begin(), dist.begin() + static_cast<std::ptrdiff_t>(k),
                      dist.end());
    // majority vote; ties by smaller distance sum, then lower label
    std::map<int, std::pair<std::size_t, double>> votes;  // label -> (count, dist sum)
    for (std::size_t j = 0; j < k; ++j) {
      auto& v = votes[train_labels[dist[j].second]];
      v.first += 1;
      v.second += std::sqrt(dist[j].first);
    }
    int best_label = -1;
    std::size_t best_count = 0;
    double best_sum = 0.0;
    for (const auto& [label, v] : votes) {
      bool better = v.first > best_count ||
                    (v.first == best_count && v.second < best_sum) ||
                    (v.first == best_count && v.second == best_sum &&
                     label < best_label);
      if (best_label == -1 || better) {
        best_label = label;
        best_count = v.first;
        best_sum = v.second;
      }
    }
    if (best_label == test_labels[i]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(n_test);
}

void write_embeddings_csv(const std::filesystem::path& path,
                          const Tensor& feats,
                          const std::vector<int>& labels) {
  if (feats.rank() != 2 || feats.dim(0) != labels.size())
    throw ShapeError("write_embeddings_csv: shape/label mismatch");
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream os(tmp, std::ios::trunc);
    if (!os) throw IoError("cannot write " + tmp.string());
    const std::size_t d = feats.dim(1);
    for (std::size_t c = 0; c < d; ++c) os << "f" << c << ",";
    os << "label\n";
    auto v = feats.data();
    for (std::size_t i = 0; i < labels.size(); ++i) {
      for (std::size_t c = 0; c < d; ++c)
        os << format_double(v[i * d + c]) << ",";
      os << labels[i] << "\n";
    }
  }
  std::filesystem::rename(tmp, path);
}

// ---- complexity -------------------------------------------------------------

namespace {

std::size_t params_matching(const TransformerModel& model,
                            const std::vector<std::string>& globs) {
  std::size_t n = 0;
  for (const auto& [name, t] : model.named_parameters())
    if (glob_match_any(globs, name)) n += t.numel();
  return n;
}

}  // namespace

std::string ComplexityReport::to_text() const {
  std::ostringstream os;
  os << "method = " << method_name(method) << "\n";
  os << "closed_form_params = " << closed_form_params << "\n";
  if (closed_form_bias_params)
    os << "closed_form_bias_params = " << closed_form_bias_params << "\n";
  os << "empirical_params = " << empirical_params << "\n";
  os << "closed_form_flops = " << closed_form_flops << "\n";
  if (empirical_macs) os << "empirical_macs = " << empirical_macs << "\n";
  for (const auto& line : detail) os << "  " << line << "\n";
  return os.str();
}

ComplexityReport complexity_report(const TransformerModel& model, Method m,
                                   std::size_t tokens) {
  const ModelSpec& spec = model.spec();
  const std::size_t L = spec.depth;
  const std::size_t D = spec.dim;
  const std::size_t N = tokens ? tokens : spec.num_patches() + 1;
  ComplexityReport r;
  r.method = m;
  switch (m) {
    case Method::adapter: {
      std::size_t dprime = model.adapter() ? model.adapter()->bottleneck
                                           : std::max<std::size_t>(1, D / 16);
      r.closed_form_params = 2 * L * D * dprime;  // 2LDD'
      r.closed_form_flops = 2 * N * L * D * dprime;
      r.empirical_params = params_matching(model, {"*.adapter.*"});
      r.detail.push_back("bottleneck D' = " + std::to_string(dprime));
      break;
    }
    case Method::vpt_shallow:
    case Method::vpt_deep: {
      std::size_t n = model.prompt_attachment()
                          ? model.prompt_attachment()->count
                          : 0;
      const bool deep = m == Method::vpt_deep;
      r.closed_form_params = deep ? n * L * D : n * D;  // nLD (deep)
      r.closed_form_flops = 2 * n * (2 * N + n) * L * D;
      r.empirical_params = params_matching(model, {"prompts.*"});
      r.detail.push_back("prompts n = " + std::to_string(n));
      break;
    }
    case Method::ssf: {
      // m is the per-layer insertion-vector count in D units, computed
      // from the actual site widths so empirical == m*L*D holds exactly
      std::size_t per_layer = 0;
      for (const auto& site : SsfAttachment::layer_sites()) {
        std::size_t width = site == std::string("qkv") ? 3 * D
                            : site == std::string("fc1") ? spec.mlp_hidden()
                                                         : D;
        per_layer += 2 * width;
        r.detail.push_back("site " + site + " width " +
                           std::to_string(width) + " (gamma+beta)");
      }
      std::size_t m_eff = per_layer % D == 0 ? per_layer / D : 0;
      r.closed_form_params = per_layer * L;  // == m_eff * L * D when exact
      r.closed_form_flops = m_eff * N * L * D;
      r.empirical_params = params_matching(model, {"*.ssf.*"});
      r.detail.push_back(
          "sites/layer = " +
          std::to_string(SsfAttachment::layer_sites().size()) +
          ", m (param vectors per layer, D units) = " +
          (m_eff ? std::to_string(m_eff) : std::string("n/a")));
      if (model.ssf() && model.ssf()->include_embed_sites) {
        r.detail.push_back("embed sites: patch_embed.ssf, final.ssf (+" +
                           std::to_string(4 * D) + " params, total sites " +
                           std::to_string(6 * L + 2) + ")");
      }
      break;
    }
    case Method::ttc: {
      std::size_t k = 0, inserted = 0;
      bool with_bias = false;
      for (const auto& [key, att] : model.ttc_attachments()) {
        k = att.selected.size();
        with_bias = att.with_bias;
        ++inserted;
      }
      if (inserted == 0) {
        k = D / 8 ? D / 8 : 1;
        inserted = L;
        with_bias = true;
      }
      r.closed_form_params = ttc_param_count(inserted, k, false);  // LKK
      if (with_bias)
        r.closed_form_bias_params =
            ttc_param_count(inserted, k, true) - r.closed_form_params;
      r.closed_form_flops = N * inserted * k * k;  // NLKK
      r.empirical_params = params_matching(model, {"*.ttc.*"});
      r.detail.push_back("K = " + std::to_string(k) + ", inserted layers = " +
                         std::to_string(inserted));
      break;
    }
    default:
      // linear/bias/layernorm/full add no extra module parameters
      r.closed_form_params = 0;
      r.closed_form_flops = 0;
      r.empirical_params = 0;
      break;
  }
  return r;
}

// ---- LayerNorm shift --------------------------------------------------------

std::vector<LnShiftRow> ln_shift_report(const TransformerModel& before,
                                        const TransformerModel& after) {
  if (!(before.spec() == after.spec()))
    throw ConfigError("ln_shift_report: model specs differ");
  auto l2_diff = [](const Tensor& a, const Tensor& b) {
    double acc = 0.0;
    auto av = a.data();
    auto bv = b.data();
    for (std::size_t i = 0; i < av.size(); ++i) {
      double diff = av[i] - bv[i];
      acc += diff * diff;
    }
    return std::sqrt(acc);
  };
  std::vector<LnShiftRow> rows;
  auto add_row = [&](const std::string& prefix) {
    LnShiftRow row;
    row.norm = prefix;
    row.gamma_l2 = l2_diff(before.param(prefix + ".gamma"),
                           after.param(prefix + ".gamma"));
    row.beta_l2 = l2_diff(before.param(prefix + ".beta"),
                          after.param(prefix + ".beta"));
    rows.push_back(std::move(row));
  };
  for (std::size_t l = 0; l < before.spec().depth; ++l) {
    add_row("layers." + std::to_string(l) + ".norm1");
    add_row("layers." + std::to_string(l) + ".norm2");
  }
  add_row("final.norm");
  return rows;
}

std::string ln_shift_csv(const std::vector<LnShiftRow>& rows) {
  std::ostringstream os;
  os << "norm,gamma_l2,beta_l2\n";
  for (const auto& r : rows)
    os << r.norm << "," << format_double(r.gamma_l2) << ","
       << format_double(r.beta_l2) << "\n";
  return os.str();
}

double spearman_correlation(std::span<const double> a,
                            std::span<const double> b) {
  if (a.size() != b.size() || a.size() < 2)
    throw ShapeError("spearman: need two equal-length vectors");
  auto ranks = [](std::span<const double> v) {
    std::vector<std::size_t> idx(v.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(),
              [&](std::size_t x, std::size_t y) { return v[x] < v[y]; });
    std::vector<double> r(v.size());
    std::size_t i = 0;
    while (i < idx.size()) {
      std::size_t j = i;
      while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
      const double avg = 0.5 * static_cast<double>(i + j) + 1.0;  // average rank
      for (std::size_t t = i; t <= j; ++t) r[idx[t]] = avg;
      i = j + 1;
    }
    return r;
  };
  std::vector<double> ra = ranks(a), rb = ranks(b);
  double ma = 0, mb = 0;
  for (std::size_t i = 0; i < ra.size(); ++i) {
    ma += ra[i];
    mb += rb[i];
  }
  ma /= static_cast<double>(ra.size());
  mb /= static_cast<double>(rb.size());
  double cov = 0, va = 0, vb = 0;
  for (std::size_t i = 0; i < ra.size(); ++i) {
    cov += (ra[i] - ma) * (rb[i] - mb);
    va += (ra[i] - ma) * (ra[i] - ma);
    vb += (rb[i] - mb) * (rb[i] - mb);
  }
  if (va == 0.0 || vb == 0.0) return 0.0;
  return cov / std::sqrt(va * vb);
}

}  // namespace ttc

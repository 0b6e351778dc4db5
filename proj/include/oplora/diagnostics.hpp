#pragma once

// Per-step training measurements and their CSV form.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <istream>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "oplora/autodiff.hpp"
#include "oplora/errors.hpp"
#include "oplora/models.hpp"
#include "oplora/optim.hpp"
#include "oplora/spectral.hpp"

namespace oplora {

inline constexpr std::int64_t kConsistencyLag = 10;

struct StepRow {
  std::int64_t step = 0;
  double lr = 0.0;
  double loss = 0.0;
  double grad_norm = 0.0;
  std::optional<double> eff_rank_sum;  // empty when B A == 0
  std::optional<double> eff_rank_max;
  std::optional<double> grad_cos_param;    // cosine vs the step 10 earlier
  std::optional<double> grad_cos_product;  // same, for dL/d(BA)
};

struct RunRecord {
  std::string fingerprint;
  std::vector<StepRow> rows;
  bool diverged = false;

  // Gradient snapshots from the most recent multiple of kConsistencyLag.
  std::optional<Vector> snapshot_param;
  std::optional<Vector> snapshot_product;
};

/// Concatenation of all parameter grads (each flattened column-major).
inline Vector flat_grad(const std::vector<Tensor>& params) {
  Index total = 0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!params[i].grad()) {
      throw ContractError("grad of parameter " + std::to_string(i) + " '" + params[i].name() + "' is missing");
    }
    total += params[i].size();
  }
  Vector out(total);
  Index offset = 0;
  for (const auto& p : params) {
    out.segment(offset, p.size()) = Eigen::Map<const Vector>(p.grad()->data(), p.size());
    offset += p.size();
  }
  return out;
}

inline double grad_norm(const std::vector<Tensor>& params) {
  double sq = 0.0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!params[i].grad()) {
      throw ContractError("grad of parameter " + std::to_string(i) + " '" + params[i].name() + "' is missing");
    }
    sq += params[i].grad()->squaredNorm();
  }
  return std::sqrt(sq);
}

/// Cosine similarity; empty (undefined) when either vector is zero.
inline std::optional<double> grad_consistency(const Vector& g_t, const Vector& g_prev) {
  if (g_t.size() != g_prev.size()) {
    throw DimensionError("grad_consistency: lengths " + std::to_string(g_t.size()) + " and " +
                         std::to_string(g_prev.size()));
  }
  const double na = g_t.norm(), nb = g_prev.norm();
  if (na == 0.0 || nb == 0.0) return std::nullopt;
  return std::clamp(g_t.dot(g_prev) / (na * nb), -1.0, 1.0);
}

/// Appends row `t` to the record. Call after backward() and before the
/// optimizer step; reads model and optimizer state without modifying them.
template <FactorModel M>
void record_step(RunRecord& record, std::int64_t t, const M& model, const MfForward& forward,
                 const OptimizerState& optimizer, const Schedule& schedule) {
  const auto expected = static_cast<std::int64_t>(record.rows.size());
  if (t != expected) {
    throw ContractError("record_step: got step " + std::to_string(t) + ", expected " + std::to_string(expected));
  }
  const auto params = model.parameters();
  StepRow row;
  row.step = t;
  row.lr = schedule_lr(schedule, optimizer.lr_peak, t);
  row.loss = forward.loss.item();
  row.grad_norm = grad_norm(params);

  if (forward.product.value().allFinite()) {
    const Vector s = product_singular_values(forward.factors.b.value(), forward.factors.a.value());
    if (const auto er = effective_rank_from_spectrum(s, SpectrumNormalization::sum); !er.degenerate) {
      row.eff_rank_sum = er.value;
    }
    if (const auto er = effective_rank_from_spectrum(s, SpectrumNormalization::max); !er.degenerate) {
      row.eff_rank_max = er.value;
    }
  }

  if (t % kConsistencyLag == 0) {
    Vector g_param = flat_grad(params);
    const Matrix residual = model.target() - forward.product.value();
    Vector g_product = Eigen::Map<const Vector>(residual.data(), residual.size()) * -2.0;
    if (t >= kConsistencyLag && record.snapshot_param) {
      row.grad_cos_param = grad_consistency(g_param, *record.snapshot_param);
      row.grad_cos_product = grad_consistency(g_product, *record.snapshot_product);
    }
    record.snapshot_param = std::move(g_param);
    record.snapshot_product = std::move(g_product);
  }
  record.rows.push_back(row);
}

struct RunSummary {
  double initial_loss = 0.0;
  double final_loss = 0.0;
  double min_loss = 0.0;
  std::int64_t min_step = 0;
  bool reached_svd = false;
  std::optional<std::int64_t> steps_to_svd;  // first step within tolerance of the SVD error
  std::vector<std::int64_t> steps_to_decade;  // k-th entry: first step with loss <= loss0 * 10^-(k+1)
  std::optional<double> final_eff_rank;
  bool diverged = false;
  std::int64_t steps_recorded = 0;
};

inline RunSummary summarize(const RunRecord& record, double svd_error, double tol) {
  RunSummary s;
  s.diverged = record.diverged;
  s.steps_recorded = static_cast<std::int64_t>(record.rows.size());
  if (record.rows.empty()) return s;
  s.initial_loss = record.rows.front().loss;
  s.final_loss = record.rows.back().loss;
  s.final_eff_rank = record.rows.back().eff_rank_sum;
  s.min_loss = s.initial_loss;
  const double target = svd_error * (1.0 + tol);
  double threshold = s.initial_loss / 10.0;
  for (const auto& row : record.rows) {
    if (!std::isfinite(row.loss)) continue;
    if (row.loss < s.min_loss) {
      s.min_loss = row.loss;
      s.min_step = row.step;
    }
    if (!s.steps_to_svd && row.loss <= target) s.steps_to_svd = row.step;
    while (threshold > 0.0 && row.loss <= threshold) {
      s.steps_to_decade.push_back(row.step);
      threshold /= 10.0;
    }
  }
  s.reached_svd = s.min_loss <= target;
  return s;
}

// ---------------------------------------------------------------------------
// CSV

inline constexpr std::string_view kCsvHeader =
    "step,lr,loss,grad_norm,eff_rank_sum,eff_rank_max,grad_cos_param,grad_cos_product";

/// Shortest decimal form that round-trips to the same double.
inline std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

inline void write_csv(std::ostream& os, const RunRecord& record) {
  auto opt = [](const std::optional<double>& v) { return v ? format_double(*v) : std::string(); };
  os << kCsvHeader << '\n';
  for (const auto& r : record.rows) {
    os << r.step << ',' << format_double(r.lr) << ',' << format_double(r.loss) << ',' << format_double(r.grad_norm)
       << ',' << opt(r.eff_rank_sum) << ',' << opt(r.eff_rank_max) << ',' << opt(r.grad_cos_param) << ','
       << opt(r.grad_cos_product) << '\n';
  }
}

inline std::string to_csv(const RunRecord& record) {
  std::ostringstream os;
  write_csv(os, record);
  return os.str();
}

namespace detail {
inline double parse_double(std::string_view field, std::size_t line) {
  double v = 0.0;
  const auto res = std::from_chars(field.data(), field.data() + field.size(), v);
  if (res.ec != std::errc{} || res.ptr != field.data() + field.size()) {
    throw ConfigError("csv line " + std::to_string(line) + ": bad number '" + std::string(field) + "'");
  }
  return v;
}
}  // namespace detail

inline std::vector<StepRow> read_csv(std::istream& is) {
  std::string line;
  if (!std::getline(is, line) || line != kCsvHeader) throw ConfigError("csv: unexpected header");
  std::vector<StepRow> rows;
  std::size_t lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string_view> f;
    std::string_view rest(line);
    for (;;) {
      const auto comma = rest.find(',');
      f.push_back(rest.substr(0, comma));
      if (comma == std::string_view::npos) break;
      rest.remove_prefix(comma + 1);
    }
    if (f.size() != 8) throw ConfigError("csv line " + std::to_string(lineno) + ": expected 8 fields");
    auto opt = [&](std::string_view s) -> std::optional<double> {
      if (s.empty()) return std::nullopt;
      return detail::parse_double(s, lineno);
    };
    StepRow r;
    r.step = static_cast<std::int64_t>(detail::parse_double(f[0], lineno));
    r.lr = detail::parse_double(f[1], lineno);
    r.loss = detail::parse_double(f[2], lineno);
    r.grad_norm = detail::parse_double(f[3], lineno);
    r.eff_rank_sum = opt(f[4]);
    r.eff_rank_max = opt(f[5]);
    r.grad_cos_param = opt(f[6]);
    r.grad_cos_product = opt(f[7]);
    rows.push_back(r);
  }
  return rows;
}

inline std::vector<StepRow> read_csv_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open csv '" + path + "'");
  return read_csv(is);
}

}  // namespace oplora

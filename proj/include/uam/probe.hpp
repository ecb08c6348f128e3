#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace uam::probe {

struct TraceSample {
  std::int64_t step = 0;
  double comp = 0.0;
};

/// Time series of per-layer COMP snapshots. Steps are strictly increasing;
/// a trace harvested from a live regularity estimator is nondecreasing in
/// comp, which record() asserts.
class CompTrace {
 public:
  CompTrace() = default;
  explicit CompTrace(std::string layer_id) : layer_id_(std::move(layer_id)) {}

  const std::string& layer_id() const { return layer_id_; }
  const std::vector<TraceSample>& samples() const { return samples_; }
  bool empty() const { return samples_.empty(); }
  std::size_t size() const { return samples_.size(); }

  void record(std::int64_t step, double comp);

 private:
  std::string layer_id_;
  std::vector<TraceSample> samples_;
};

struct DeltaSeries {
  std::string first;
  std::string second;
  std::vector<TraceSample> samples;  // second - first on shared steps
};

struct DerivativeSeries {
  std::string layer_id;
  int order = 1;
  int window = 1;
  std::vector<TraceSample> samples;
};

struct TraceReport {
  std::vector<CompTrace> traces;
  std::vector<DeltaSeries> deltas;
  std::vector<DerivativeSeries> derivatives;
  int window = 10;
};

/// Pointwise comp_b - comp_a over the step intersection (later layer minus
/// earlier layer by convention). Disjoint step sets are an error.
std::vector<TraceSample> delta_trace(const CompTrace& a, const CompTrace& b);

/// Repeats `order` times: moving average over `window` samples, then a
/// forward difference. The result has length size() - order * window and
/// keeps the step of each value's leading sample.
std::vector<TraceSample> smoothed_derivative(const CompTrace& trace, int order,
                                             int window);

/// Traces sorted by layer id, deltas between consecutive layers, smoothed
/// derivatives of order 1 and 2 where the trace is long enough.
TraceReport build_report(std::vector<CompTrace> traces, int window);

enum class ReportFormat { Csv, Json };

/// CSV: header step,layer_id,comp, one row per sample, layer_id then step
/// ordering, numbers at 12 significant digits (enough for a 1e-9 round
/// trip). JSON mirrors the whole report. Both are byte-deterministic.
void export_report(const TraceReport& report, ReportFormat format,
                   const std::string& path);

std::vector<CompTrace> read_trace_csv(const std::string& path);
TraceReport read_report_json(const std::string& path);

struct PlotOptions {
  int width = 960;
  int height = 600;
  std::string title;
};

/// Standalone SVG line plot: one polyline per trace, linear axes scaled to
/// the data extent with a 5% margin, ticks and a layer-id legend.
void emit_svg_lineplot(std::span<const CompTrace> traces,
                       const std::string& path,
                       const PlotOptions& options = {});

void emit_svg_lineplot(const TraceReport& report, const std::string& path,
                       const PlotOptions& options = {});

}  // namespace uam::probe

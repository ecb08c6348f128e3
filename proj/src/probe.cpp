#include "uam/probe.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <utility>

#include "json.hpp"

namespace uam::probe {

void CompTrace::record(std::int64_t step, double comp) {
  if (!samples_.empty() && step <= samples_.back().step) {
    throw std::invalid_argument("CompTrace: step must increase");
  }
  samples_.push_back(TraceSample{step, comp});
}

std::vector<TraceSample> delta_trace(const CompTrace& a, const CompTrace& b) {
  std::vector<TraceSample> out;
  std::size_t ia = 0, ib = 0;
  const auto& sa = a.samples();
  const auto& sb = b.samples();
  while (ia < sa.size() && ib < sb.size()) {
    if (sa[ia].step < sb[ib].step) {
      ++ia;
    } else if (sb[ib].step < sa[ia].step) {
      ++ib;
    } else {
      out.push_back(TraceSample{sa[ia].step, sb[ib].comp - sa[ia].comp});
      ++ia;
      ++ib;
    }
  }
  if (out.empty()) {
    throw std::invalid_argument("delta_trace: traces share no steps");
  }
  return out;
}

std::vector<TraceSample> smoothed_derivative(const CompTrace& trace, int order,
                                             int window) {
  if (order != 1 && order != 2) {
    throw std::invalid_argument("smoothed_derivative: order must be 1 or 2");
  }
  if (window < 1) {
    throw std::invalid_argument("smoothed_derivative: window must be >= 1");
  }
  if (std::cmp_less_equal(trace.size(),
                          static_cast<std::size_t>(order) *
                              static_cast<std::size_t>(window))) {
    throw std::invalid_argument("smoothed_derivative: trace too short");
  }

  std::vector<double> values(trace.size());
  for (std::size_t i = 0; i < trace.size(); ++i) {
    values[i] = trace.samples()[i].comp;
  }
  for (int round = 0; round < order; ++round) {
    // moving average, then one forward difference; net length cost: window
    std::vector<double> smooth(values.size() - static_cast<std::size_t>(window) + 1);
    double acc = 0.0;
    for (int k = 0; k < window; ++k) acc += values[static_cast<std::size_t>(k)];
    smooth[0] = acc / window;
    for (std::size_t i = 1; i < smooth.size(); ++i) {
      acc += values[i + static_cast<std::size_t>(window) - 1] - values[i - 1];
      smooth[i] = acc / window;
    }
    std::vector<double> diff(smooth.size() - 1);
    for (std::size_t i = 0; i + 1 < smooth.size(); ++i) {
      diff[i] = smooth[i + 1] - smooth[i];
    }
    values = std::move(diff);
  }

  std::vector<TraceSample> out(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) {
    out[i] = TraceSample{trace.samples()[i].step, values[i]};
  }
  return out;
}

TraceReport build_report(std::vector<CompTrace> traces, int window) {
  std::sort(traces.begin(), traces.end(),
            [](const CompTrace& a, const CompTrace& b) {
              return a.layer_id() < b.layer_id();
            });
  TraceReport report;
  report.window = window;
  report.traces = std::move(traces);
  for (std::size_t i = 0; i + 1 < report.traces.size(); ++i) {
    const auto& lo = report.traces[i];
    const auto& hi = report.traces[i + 1];
    if (lo.empty() || hi.empty()) continue;
    report.deltas.push_back(
        DeltaSeries{lo.layer_id(), hi.layer_id(), delta_trace(lo, hi)});
  }
  for (const auto& t : report.traces) {
    for (int order : {1, 2}) {
      if (std::cmp_greater(t.size(), static_cast<std::size_t>(order) *
                                         static_cast<std::size_t>(window))) {
        report.derivatives.push_back(DerivativeSeries{
            t.layer_id(), order, window, smoothed_derivative(t, order, window)});
      }
    }
  }
  return report;
}

namespace {

std::string format_number(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.12g", v);
  return buf;
}

nlohmann::json samples_to_json(const std::vector<TraceSample>& samples) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& s : samples) {
    arr.push_back(nlohmann::json::array({s.step, s.comp}));
  }
  return arr;
}

std::vector<TraceSample> samples_from_json(const nlohmann::json& arr) {
  std::vector<TraceSample> out;
  for (const auto& pair : arr) {
    out.push_back(TraceSample{pair.at(0).get<std::int64_t>(),
                              pair.at(1).get<double>()});
  }
  return out;
}

}  // namespace

void export_report(const TraceReport& report, ReportFormat format,
                   const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);

  if (format == ReportFormat::Csv) {
    std::vector<const CompTrace*> ordered;
    for (const auto& t : report.traces) ordered.push_back(&t);
    std::sort(ordered.begin(), ordered.end(),
              [](const CompTrace* a, const CompTrace* b) {
                return a->layer_id() < b->layer_id();
              });
    out << "step,layer_id,comp\n";
    for (const auto* t : ordered) {
      for (const auto& s : t->samples()) {
        out << s.step << ',' << t->layer_id() << ',' << format_number(s.comp)
            << '\n';
      }
    }
    return;
  }

  nlohmann::json doc;
  doc["window"] = report.window;
  doc["traces"] = nlohmann::json::array();
  for (const auto& t : report.traces) {
    doc["traces"].push_back(nlohmann::json{
        {"layer_id", t.layer_id()}, {"samples", samples_to_json(t.samples())}});
  }
  doc["deltas"] = nlohmann::json::array();
  for (const auto& d : report.deltas) {
    doc["deltas"].push_back(nlohmann::json{{"first", d.first},
                                           {"second", d.second},
                                           {"samples", samples_to_json(d.samples)}});
  }
  doc["derivatives"] = nlohmann::json::array();
  for (const auto& d : report.derivatives) {
    doc["derivatives"].push_back(
        nlohmann::json{{"layer_id", d.layer_id},
                       {"order", d.order},
                       {"window", d.window},
                       {"samples", samples_to_json(d.samples)}});
  }
  out << doc.dump(2) << '\n';
}

std::vector<CompTrace> read_trace_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path);
  std::string line;
  if (!std::getline(in, line) || line != "step,layer_id,comp") {
    throw std::runtime_error("trace csv: bad header in " + path);
  }
  std::map<std::string, CompTrace> by_layer;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto c1 = line.find(',');
    const auto c2 = line.find(',', c1 + 1);
    if (c1 == std::string::npos || c2 == std::string::npos) {
      throw std::runtime_error("trace csv: malformed row: " + line);
    }
    const std::int64_t step = std::stoll(line.substr(0, c1));
    const std::string layer = line.substr(c1 + 1, c2 - c1 - 1);
    const double comp = std::stod(line.substr(c2 + 1));
    auto [it, inserted] = by_layer.try_emplace(layer, CompTrace(layer));
    it->second.record(step, comp);
  }
  std::vector<CompTrace> out;
  out.reserve(by_layer.size());
  for (auto& [_, trace] : by_layer) out.push_back(std::move(trace));
  return out;
}

TraceReport read_report_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path);
  nlohmann::json doc;
  in >> doc;
  TraceReport report;
  report.window = doc.at("window").get<int>();
  for (const auto& t : doc.at("traces")) {
    CompTrace trace(t.at("layer_id").get<std::string>());
    for (const auto& s : samples_from_json(t.at("samples"))) {
      trace.record(s.step, s.comp);
    }
    report.traces.push_back(std::move(trace));
  }
  for (const auto& d : doc.at("deltas")) {
    report.deltas.push_back(DeltaSeries{d.at("first").get<std::string>(),
                                        d.at("second").get<std::string>(),
                                        samples_from_json(d.at("samples"))});
  }
  for (const auto& d : doc.at("derivatives")) {
    report.derivatives.push_back(
        DerivativeSeries{d.at("layer_id").get<std::string>(),
                         d.at("order").get<int>(), d.at("window").get<int>(),
                         samples_from_json(d.at("samples"))});
  }
  return report;
}

namespace {

const char* kPalette[10] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e",
                            "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
                            "#bcbd22", "#17becf"};

std::string escape_xml(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

std::string format_coord(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.2f", v);
  return buf;
}

std::string format_tick(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.6g", v);
  return buf;
}

}  // namespace

void emit_svg_lineplot(std::span<const CompTrace> traces,
                       const std::string& path, const PlotOptions& options) {
  bool any = false;
  double x_min = 0, x_max = 0, y_min = 0, y_max = 0;
  for (const auto& t : traces) {
    for (const auto& s : t.samples()) {
      if (!std::isfinite(s.comp)) {
        throw std::invalid_argument("svg plot: non-finite sample");
      }
      const auto x = static_cast<double>(s.step);
      if (!any) {
        x_min = x_max = x;
        y_min = y_max = s.comp;
        any = true;
      } else {
        x_min = std::min(x_min, x);
        x_max = std::max(x_max, x);
        y_min = std::min(y_min, s.comp);
        y_max = std::max(y_max, s.comp);
      }
    }
  }
  if (!any) throw std::invalid_argument("svg plot: no samples to plot");

  // 5% margin; degenerate extents widen by one unit.
  double x_pad = (x_max - x_min) * 0.05;
  double y_pad = (y_max - y_min) * 0.05;
  if (x_pad == 0.0) x_pad = 1.0;
  if (y_pad == 0.0) y_pad = 1.0;
  x_min -= x_pad;
  x_max += x_pad;
  y_min -= y_pad;
  y_max += y_pad;

  const double left = 70, right = 150, top = 40, bottom = 50;
  const double w = options.width, h = options.height;
  const double plot_w = w - left - right;
  const double plot_h = h - top - bottom;
  const auto sx = [&](double x) {
    return left + (x - x_min) / (x_max - x_min) * plot_w;
  };
  const auto sy = [&](double y) {
    return top + plot_h - (y - y_min) / (y_max - y_min) * plot_h;
  };

  std::ostringstream svg;
  svg << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << options.width
      << "\" height=\"" << options.height << "\" viewBox=\"0 0 "
      << options.width << " " << options.height << "\">\n";
  svg << "<rect width=\"" << options.width << "\" height=\"" << options.height
      << "\" fill=\"white\"/>\n";
  if (!options.title.empty()) {
    svg << "<text x=\"" << format_coord(w / 2)
        << "\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" "
           "font-size=\"16\">"
        << escape_xml(options.title) << "</text>\n";
  }

  // axes
  svg << "<line x1=\"" << format_coord(left) << "\" y1=\"" << format_coord(top)
      << "\" x2=\"" << format_coord(left) << "\" y2=\""
      << format_coord(top + plot_h) << "\" stroke=\"black\"/>\n";
  svg << "<line x1=\"" << format_coord(left) << "\" y1=\""
      << format_coord(top + plot_h) << "\" x2=\"" << format_coord(left + plot_w)
      << "\" y2=\"" << format_coord(top + plot_h) << "\" stroke=\"black\"/>\n";

  for (int tick = 0; tick <= 4; ++tick) {
    const double fx = x_min + (x_max - x_min) * tick / 4.0;
    const double fy = y_min + (y_max - y_min) * tick / 4.0;
    svg << "<line x1=\"" << format_coord(sx(fx)) << "\" y1=\""
        << format_coord(top + plot_h) << "\" x2=\"" << format_coord(sx(fx))
        << "\" y2=\"" << format_coord(top + plot_h + 5)
        << "\" stroke=\"black\"/>\n";
    svg << "<text x=\"" << format_coord(sx(fx)) << "\" y=\""
        << format_coord(top + plot_h + 20)
        << "\" text-anchor=\"middle\" font-family=\"sans-serif\" "
           "font-size=\"11\">"
        << format_tick(fx) << "</text>\n";
    svg << "<line x1=\"" << format_coord(left - 5) << "\" y1=\""
        << format_coord(sy(fy)) << "\" x2=\"" << format_coord(left)
        << "\" y2=\"" << format_coord(sy(fy)) << "\" stroke=\"black\"/>\n";
    svg << "<text x=\"" << format_coord(left - 8) << "\" y=\""
        << format_coord(sy(fy) + 4)
        << "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\">"
        << format_tick(fy) << "</text>\n";
  }

  std::size_t color = 0;
  double legend_y = top + 10;
  for (const auto& t : traces) {
    if (t.empty()) continue;
    const char* stroke = kPalette[color % 10];
    svg << "<polyline fill=\"none\" stroke=\"" << stroke
        << "\" stroke-width=\"1.5\" points=\"";
    bool first = true;
    for (const auto& s : t.samples()) {
      if (!first) svg << ' ';
      svg << format_coord(sx(static_cast<double>(s.step))) << ','
          << format_coord(sy(s.comp));
      first = false;
    }
    svg << "\"/>\n";
    const double lx = left + plot_w + 12;
    svg << "<line x1=\"" << format_coord(lx) << "\" y1=\""
        << format_coord(legend_y) << "\" x2=\"" << format_coord(lx + 22)
        << "\" y2=\"" << format_coord(legend_y) << "\" stroke=\"" << stroke
        << "\" stroke-width=\"2\"/>\n";
    svg << "<text x=\"" << format_coord(lx + 28) << "\" y=\""
        << format_coord(legend_y + 4)
        << "\" font-family=\"sans-serif\" font-size=\"12\">"
        << escape_xml(t.layer_id()) << "</text>\n";
    legend_y += 18;
    ++color;
  }
  svg << "</svg>\n";

  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << svg.str();
}

void emit_svg_lineplot(const TraceReport& report, const std::string& path,
                       const PlotOptions& options) {
  emit_svg_lineplot(std::span<const CompTrace>(report.traces), path, options);
}

}  // namespace uam::probe

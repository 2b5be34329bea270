#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

#include "zolab/bench.hpp"
#include "zolab/errors.hpp"

namespace zolab::bench {

namespace {

std::string fmt(double x) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, x);
  return std::string(buf, res.ptr);
}

std::string fmt(std::uint64_t x) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof buf, x);
  return std::string(buf, res.ptr);
}

// Field quoting per RFC 4180; identifiers here rarely need it.
std::string field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char ch : s) {
    if (ch == '"') out += '"';
    out += ch;
  }
  return out + "\"";
}

void write_file(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) {
    std::error_code ec;
    std::filesystem::create_directories(path.parent_path(), ec);
    if (ec) throw IoError("cannot create directory " + path.parent_path().string() + ": " + ec.message());
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << text;
  out.flush();
  if (!out) throw IoError("write failed for " + path.string());
}

}  // namespace

std::string to_csv(const SweepResult& result) {
  std::string out = kCsvHeader;
  out += '\n';
  for (const auto& r : result.rows) {
    out += field(r.experiment) + ',' + field(r.arm) + ',' + fmt(static_cast<std::uint64_t>(r.r)) + ',' +
           field(r.mode) + ',' + fmt(r.sigma_xi) + ',' + field(r.metric) + ',' + fmt(r.value) + ',' +
           fmt(r.std_error) + ',' + fmt(r.seed) + '\n';
  }
  return out;
}

void emit_csv(const SweepResult& result, const std::filesystem::path& path) {
  write_file(path, to_csv(result));
}

namespace {

struct Series {
  std::vector<std::pair<double, double>> points;
};

struct Chart {
  std::string title;
  bool by_step = false;
  std::map<std::string, Series> series;
};

constexpr const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e",
                                    "#9467bd", "#8c564b", "#e377c2", "#17becf"};

void draw_chart(std::ostringstream& os, const Chart& chart, double top) {
  const double w = 640, h = 300, left = 70, right = 170, pad_top = 30, pad_bottom = 40;
  const double pw = w - left - right, ph = h - pad_top - pad_bottom;
  const bool snr = chart.title.find("snr") != std::string::npos;

  double x0 = INFINITY, x1 = -INFINITY, y0 = INFINITY, y1 = -INFINITY;
  bool positive = true;
  for (const auto& [_, s] : chart.series) {
    for (auto [x, y] : s.points) {
      if (!std::isfinite(y)) continue;
      x0 = std::min(x0, x); x1 = std::max(x1, x);
      y0 = std::min(y0, y); y1 = std::max(y1, y);
      positive = positive && x > 0 && y > 0;
    }
  }
  if (!std::isfinite(x0) || !std::isfinite(y0)) return;
  const bool logy = snr && positive;
  const bool logx = snr && positive && !chart.by_step;
  if (logy) { y0 = std::min(y0, 1.0); y1 = std::max(y1, 1.0); }
  auto tx = [&](double v) { return logx ? std::log10(v) : v; };
  auto ty = [&](double v) { return logy ? std::log10(v) : v; };
  double ax0 = tx(x0), ax1 = tx(x1), ay0 = ty(y0), ay1 = ty(y1);
  if (ax1 == ax0) { ax0 -= 0.5; ax1 += 0.5; }
  if (ay1 == ay0) { ay0 -= 0.5; ay1 += 0.5; }
  auto px = [&](double v) { return left + (tx(v) - ax0) / (ax1 - ax0) * pw; };
  auto py = [&](double v) { return top + pad_top + ph - (ty(v) - ay0) / (ay1 - ay0) * ph; };

  os << "<g>\n";
  os << "<text x='" << left << "' y='" << top + 18 << "' font-size='14'>" << chart.title
     << (logy ? " (log-log)" : "") << "</text>\n";
  os << "<rect x='" << left << "' y='" << top + pad_top << "' width='" << pw << "' height='" << ph
     << "' fill='none' stroke='#444'/>\n";
  os << "<text x='" << left << "' y='" << top + h - 10 << "' font-size='11'>"
     << (chart.by_step ? "step" : "rank") << " [" << fmt(x0) << ", " << fmt(x1) << "]  y ["
     << fmt(y0) << ", " << fmt(y1) << "]</text>\n";
  if (snr) {
    const double y = py(1.0);
    if (y >= top + pad_top && y <= top + pad_top + ph) {
      os << "<line x1='" << left << "' y1='" << y << "' x2='" << left + pw << "' y2='" << y
         << "' stroke='#888' stroke-dasharray='4 3'/>\n";
      os << "<text x='" << left + pw + 4 << "' y='" << y + 4 << "' font-size='10'>SNR = 1</text>\n";
    }
  }
  std::size_t idx = 0;
  for (const auto& [name, s] : chart.series) {
    const char* color = kPalette[idx % std::size(kPalette)];
    os << "<polyline fill='none' stroke='" << color << "' stroke-width='1.5' points='";
    for (auto [x, y] : s.points) {
      if (std::isfinite(y)) os << px(x) << ',' << py(y) << ' ';
    }
    os << "'/>\n";
    if (idx < 12) {
      os << "<text x='" << left + pw + 4 << "' y='" << top + pad_top + 12 + 12 * idx
         << "' font-size='10' fill='" << color << "'>" << name << "</text>\n";
    }
    ++idx;
  }
  os << "</g>\n";
}

}  // namespace

std::string to_svg(const SweepResult& result) {
  std::map<std::string, Chart> charts;
  std::size_t sigma_count = 0;
  {
    std::vector<double> sig;
    for (const auto& r : result.rows) sig.push_back(r.sigma_xi);
    std::sort(sig.begin(), sig.end());
    sigma_count = static_cast<std::size_t>(std::unique(sig.begin(), sig.end()) - sig.begin());
  }
  for (const auto& r : result.rows) {
    const auto at = r.metric.find('@');
    const bool by_step = at != std::string::npos;
    if (!by_step && r.r == 0) continue;
    const std::string base = by_step ? r.metric.substr(0, at) : r.metric;
    const double x = by_step ? std::stod(r.metric.substr(at + 1)) : static_cast<double>(r.r);
    Chart& chart = charts[base];
    chart.title = base;
    chart.by_step = by_step;
    std::string key = r.arm;
    if (by_step) key += " r=" + fmt(static_cast<std::uint64_t>(r.r));
    if (sigma_count > 1) key += " sigma=" + fmt(r.sigma_xi);
    if (by_step) key += " seed=" + fmt(r.seed);
    chart.series[key].points.emplace_back(x, r.value);
  }
  std::vector<const Chart*> drawn;
  for (const auto& [_, c] : charts) {
    const bool line = std::any_of(c.series.begin(), c.series.end(),
                                  [](const auto& s) { return s.second.points.size() > 1; });
    if (line) drawn.push_back(&c);
  }
  const double h = 300;
  std::ostringstream os;
  os << "<svg xmlns='http://www.w3.org/2000/svg' width='640' height='"
     << std::max<double>(h * static_cast<double>(drawn.size()), 40) << "' font-family='sans-serif'>\n";
  os << "<title>" << result.experiment << "</title>\n";
  double top = 0;
  for (const Chart* c : drawn) {
    draw_chart(os, *c, top);
    top += h;
  }
  os << "</svg>\n";
  return os.str();
}

void emit_svg(const SweepResult& result, const std::filesystem::path& path) {
  write_file(path, to_svg(result));
}

}  // namespace zolab::bench

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <optional>
#include <string>
#include <vector>

#include "neurolens/csv.hpp"
#include "neurolens/error.hpp"

namespace neurolens {

namespace detail {

inline std::string xml_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out.push_back(c);
    }
  }
  return out;
}

inline std::optional<double> parse_cell(const std::string& s) {
  if (s.empty() || s == "---") return std::nullopt;
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (end == s.c_str() || *end != '\0' || !std::isfinite(v)) {
    fail(ErrorCode::SchemaError, "heatmap cell '" + s + "' is not a number");
  }
  return v;
}

}  // namespace detail

/// Diverging heatmap (blue negative, red positive, grey for empty cells) from a matrix CSV:
/// header row of column names, first column of row names.
inline std::string heatmap_svg(const std::string& csv_text, const std::string& title = "") {
  const auto rows = csv::parse(csv_text);
  if (rows.size() < 2 || rows.front().size() < 2) fail(ErrorCode::EmptyInput, "heatmap CSV needs a header and at least one row");
  const std::size_t ncol = rows.front().size() - 1;
  std::vector<std::vector<std::optional<double>>> cells;
  double max_abs = 0.0;
  for (std::size_t r = 1; r < rows.size(); ++r) {
    if (rows[r].size() != ncol + 1) fail(ErrorCode::SchemaError, "heatmap row " + std::to_string(r) + " has the wrong width");
    std::vector<std::optional<double>> line;
    for (std::size_t c = 1; c <= ncol; ++c) {
      line.push_back(detail::parse_cell(rows[r][c]));
      if (line.back()) max_abs = std::max(max_abs, std::abs(*line.back()));
    }
    cells.push_back(std::move(line));
  }

  const int cw = 110, ch = 34, left = 170, top = title.empty() ? 40 : 70;
  const int width = left + cw * static_cast<int>(ncol) + 20;
  const int height = top + ch * static_cast<int>(cells.size()) + 20;
  char buf[512];
  std::string out;
  std::snprintf(buf, sizeof buf,
                "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"%d\" height=\"%d\" font-family=\"sans-serif\" font-size=\"12\">\n",
                width, height);
  out += buf;
  if (!title.empty()) out += "<text x=\"10\" y=\"24\" font-size=\"16\">" + detail::xml_escape(title) + "</text>\n";
  for (std::size_t c = 0; c < ncol; ++c) {
    std::snprintf(buf, sizeof buf, "<text x=\"%d\" y=\"%d\" text-anchor=\"middle\">", left + cw * static_cast<int>(c) + cw / 2, top - 10);
    out += buf + detail::xml_escape(rows[0][c + 1]) + "</text>\n";
  }
  for (std::size_t r = 0; r < cells.size(); ++r) {
    const int y = top + ch * static_cast<int>(r);
    std::snprintf(buf, sizeof buf, "<text x=\"%d\" y=\"%d\" text-anchor=\"end\">", left - 8, y + ch / 2 + 4);
    out += buf + detail::xml_escape(rows[r + 1][0]) + "</text>\n";
    for (std::size_t c = 0; c < ncol; ++c) {
      const int x = left + cw * static_cast<int>(c);
      const auto& v = cells[r][c];
      int red = 220, green = 220, blue = 220;
      std::string label = "---";
      if (v) {
        const double t = max_abs > 0.0 ? std::clamp(*v / max_abs, -1.0, 1.0) : 0.0;
        const int fade = static_cast<int>(std::lround(255.0 * (1.0 - std::abs(t))));
        red = t >= 0 ? 255 : fade;
        blue = t <= 0 ? 255 : fade;
        green = fade;
        std::snprintf(buf, sizeof buf, "%.2f", *v);
        label = buf;
      }
      std::snprintf(buf, sizeof buf,
                    "<rect x=\"%d\" y=\"%d\" width=\"%d\" height=\"%d\" fill=\"rgb(%d,%d,%d)\" stroke=\"white\"/>\n"
                    "<text x=\"%d\" y=\"%d\" text-anchor=\"middle\">%s</text>\n",
                    x, y, cw, ch, red, green, blue, x + cw / 2, y + ch / 2 + 4, label.c_str());
      out += buf;
    }
  }
  out += "</svg>\n";
  return out;
}

}  // namespace neurolens

#include "vqtok/plot.hpp"

#include "vqtok/errors.hpp"

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>

namespace vqtok::plot {

namespace {

const cv::Scalar kColors[] = {{200, 80, 30}, {40, 40, 210}, {40, 160, 40}, {160, 40, 160}, {30, 150, 200}};

void save(const std::filesystem::path& path, const cv::Mat& image) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  if (!cv::imwrite(path.string(), image)) throw std::runtime_error("failed to write " + path.string());
}

std::string short_number(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4g", v);
  return buf;
}

}  // namespace

void line_chart(const std::filesystem::path& path, const std::string& title, const std::vector<std::string>& x_labels,
                const std::vector<Series>& series) {
  const int width = 640, height = 420, left = 80, right = 150, top = 40, bottom = 50;
  cv::Mat img(height, width, CV_8UC3, cv::Scalar(255, 255, 255));
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (const auto& s : series) {
    for (double v : s.values) {
      if (std::isfinite(v)) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
      }
    }
  }
  if (!std::isfinite(lo)) lo = 0.0, hi = 1.0;
  if (hi - lo < 1e-12) lo -= 0.5, hi += 0.5;
  const double pad = 0.08 * (hi - lo);
  lo -= pad;
  hi += pad;
  const int plot_w = width - left - right, plot_h = height - top - bottom;
  const auto n = static_cast<int>(x_labels.size());
  auto px = [&](int i) { return left + (n <= 1 ? plot_w / 2 : i * plot_w / (n - 1)); };
  auto py = [&](double v) { return top + static_cast<int>(std::lround((hi - v) / (hi - lo) * plot_h)); };

  cv::rectangle(img, {left, top}, {left + plot_w, top + plot_h}, cv::Scalar(0, 0, 0), 1);
  cv::putText(img, title, {left, top - 14}, cv::FONT_HERSHEY_SIMPLEX, 0.6, cv::Scalar(0, 0, 0), 1, cv::LINE_AA);
  for (int k = 0; k <= 4; ++k) {
    const double v = lo + (hi - lo) * k / 4.0;
    const int y = py(v);
    cv::line(img, {left - 4, y}, {left, y}, cv::Scalar(0, 0, 0));
    cv::putText(img, short_number(v), {6, y + 4}, cv::FONT_HERSHEY_SIMPLEX, 0.4, cv::Scalar(0, 0, 0), 1, cv::LINE_AA);
  }
  for (int i = 0; i < n; ++i) {
    cv::line(img, {px(i), top + plot_h}, {px(i), top + plot_h + 4}, cv::Scalar(0, 0, 0));
    cv::putText(img, x_labels[static_cast<size_t>(i)], {px(i) - 14, top + plot_h + 22}, cv::FONT_HERSHEY_SIMPLEX, 0.45,
                cv::Scalar(0, 0, 0), 1, cv::LINE_AA);
  }
  for (size_t s = 0; s < series.size(); ++s) {
    const auto color = kColors[s % std::size(kColors)];
    std::vector<cv::Point> run;
    auto flush = [&] {
      if (run.size() > 1) cv::polylines(img, run, false, color, 2, cv::LINE_AA);
      run.clear();
    };
    for (int i = 0; i < n && i < static_cast<int>(series[s].values.size()); ++i) {
      const double v = series[s].values[static_cast<size_t>(i)];
      if (!std::isfinite(v)) {
        flush();
        continue;
      }
      cv::Point p{px(i), py(v)};
      cv::circle(img, p, 4, color, cv::FILLED, cv::LINE_AA);
      run.push_back(p);
    }
    flush();
    const int ly = top + 20 + 22 * static_cast<int>(s);
    cv::line(img, {width - right + 12, ly - 4}, {width - right + 36, ly - 4}, color, 2, cv::LINE_AA);
    cv::putText(img, series[s].name, {width - right + 42, ly}, cv::FONT_HERSHEY_SIMPLEX, 0.45, cv::Scalar(0, 0, 0), 1,
                cv::LINE_AA);
  }
  save(path, img);
}

void image_grid(const std::filesystem::path& path, const std::vector<torch::Tensor>& rows, int scale) {
  if (rows.empty()) throw ValidationError("image_grid", "no rows to draw");
  const auto h = rows[0].size(1), w = rows[0].size(2);
  int64_t cols = 0;
  for (const auto& r : rows) {
    if (r.dim() != 4 || r.size(1) != h || r.size(2) != w || r.size(3) != 3) {
      throw ValidationError("image_grid", "rows must be K x H x W x 3 with a shared H and W");
    }
    cols = std::max(cols, r.size(0));
  }
  const int gap = 2;
  const int cell_h = static_cast<int>(h) * scale, cell_w = static_cast<int>(w) * scale;
  cv::Mat canvas(static_cast<int>(rows.size()) * (cell_h + gap) + gap, static_cast<int>(cols) * (cell_w + gap) + gap,
                 CV_8UC3, cv::Scalar(255, 255, 255));
  for (size_t r = 0; r < rows.size(); ++r) {
    auto bytes = (rows[r].detach().to(torch::kFloat32).clamp(0.0, 1.0) * 255.0).round().to(torch::kUInt8).contiguous();
    for (int64_t k = 0; k < bytes.size(0); ++k) {
      auto one = bytes[k].contiguous();
      cv::Mat rgb(static_cast<int>(h), static_cast<int>(w), CV_8UC3, one.data_ptr<uint8_t>());
      cv::Mat bgr, big;
      cv::cvtColor(rgb, bgr, cv::COLOR_RGB2BGR);
      cv::resize(bgr, big, cv::Size(cell_w, cell_h), 0, 0, cv::INTER_NEAREST);
      big.copyTo(canvas(cv::Rect(gap + static_cast<int>(k) * (cell_w + gap), gap + static_cast<int>(r) * (cell_h + gap),
                                 cell_w, cell_h)));
    }
  }
  save(path, canvas);
}

}  // namespace vqtok::plot

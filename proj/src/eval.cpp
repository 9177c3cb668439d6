#include "mamat/eval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <istream>
#include <iomanip>
#include <limits>
#include <numeric>
#include <ostream>
#include <set>
#include <sstream>

namespace mamat::eval {

double psnr(const Tensor<float>& a, const Tensor<float>& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("psnr: shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) + " differ");
  }
  if (a.size() == 0) throw ShapeError("psnr: empty frame");
  double se = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = double(a[i]) - double(b[i]);
    se += d * d;
  }
  const double mse = se / double(a.size());
  if (mse == 0) return kPsnrCap;
  return std::min(kPsnrCap, -10.0 * std::log10(mse));
}

namespace {

std::vector<double> ssim_window(const SsimOptions& opt) {
  const auto r = std::ptrdiff_t(opt.window / 2);
  std::vector<double> k(opt.window);
  double s = 0;
  for (std::ptrdiff_t i = -r; i <= r; ++i) s += k[i + r] = std::exp(-0.5 * double(i * i) / (opt.sigma * opt.sigma));
  for (auto& v : k) v /= s;
  return k;
}

// Separable valid-region filter of an h x w plane.
std::vector<double> filter_valid(const std::vector<double>& p, std::size_t h, std::size_t w,
                                 const std::vector<double>& k) {
  const std::size_t n = k.size(), oh = h - n + 1, ow = w - n + 1;
  std::vector<double> tmp(h * ow), out(oh * ow);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < ow; ++x) {
      double s = 0;
      for (std::size_t i = 0; i < n; ++i) s += k[i] * p[y * w + x + i];
      tmp[y * ow + x] = s;
    }
  for (std::size_t y = 0; y < oh; ++y)
    for (std::size_t x = 0; x < ow; ++x) {
      double s = 0;
      for (std::size_t i = 0; i < n; ++i) s += k[i] * tmp[(y + i) * ow + x];
      out[y * ow + x] = s;
    }
  return out;
}

double ssim_plane(const float* a, const float* b, std::size_t h, std::size_t w, const SsimOptions& opt,
                  const std::vector<double>& k) {
  const std::size_t n = h * w;
  std::vector<double> pa(a, a + n), pb(b, b + n), aa(n), bb(n), ab(n);
  for (std::size_t i = 0; i < n; ++i) {
    aa[i] = pa[i] * pa[i];
    bb[i] = pb[i] * pb[i];
    ab[i] = pa[i] * pb[i];
  }
  const auto mu_a = filter_valid(pa, h, w, k), mu_b = filter_valid(pb, h, w, k);
  const auto e_aa = filter_valid(aa, h, w, k), e_bb = filter_valid(bb, h, w, k), e_ab = filter_valid(ab, h, w, k);
  const double c1 = std::pow(opt.k1 * opt.range, 2), c2 = std::pow(opt.k2 * opt.range, 2);
  double total = 0;
  for (std::size_t i = 0; i < mu_a.size(); ++i) {
    const double ma = mu_a[i], mb = mu_b[i];
    const double va = e_aa[i] - ma * ma, vb = e_bb[i] - mb * mb, cov = e_ab[i] - ma * mb;
    total += ((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
  }
  return total / double(mu_a.size());
}

}  // namespace

double ssim(const Tensor<float>& a, const Tensor<float>& b, const SsimOptions& opt) {
  if (a.shape() != b.shape()) {
    throw ShapeError("ssim: shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) + " differ");
  }
  if (a.rank() != 2 && a.rank() != 3) throw ShapeError("ssim expects H x W or C x H x W");
  if (opt.window == 0 || opt.window % 2 == 0) throw std::invalid_argument("ssim window must be odd");
  const std::size_t C = a.rank() == 3 ? a.dim(0) : 1;
  const std::size_t H = a.dim(a.rank() - 2), W = a.dim(a.rank() - 1);
  if (H < opt.window || W < opt.window) {
    throw ShapeError("ssim: frame " + std::to_string(H) + "x" + std::to_string(W) + " is smaller than the " +
                     std::to_string(opt.window) + "x" + std::to_string(opt.window) + " window");
  }
  const auto k = ssim_window(opt);
  double total = 0;
  for (std::size_t c = 0; c < C; ++c) total += ssim_plane(a.ptr() + c * H * W, b.ptr() + c * H * W, H, W, opt, k);
  return total / double(C);
}

void Box::validate() const {
  if (!(x_max > x_min && y_max > y_min)) {
    throw std::invalid_argument("degenerate box in image " + image_id + " (class " + std::to_string(class_id) + ")");
  }
  if (score && !(*score >= 0 && *score <= 1)) throw std::invalid_argument("detection score outside [0, 1]");
}

double iou(const Box& a, const Box& b) {
  a.validate();
  b.validate();
  const double iw = std::min(a.x_max, b.x_max) - std::max(a.x_min, b.x_min);
  const double ih = std::min(a.y_max, b.y_max) - std::max(a.y_min, b.y_min);
  if (iw <= 0 || ih <= 0) return 0.0;
  const double inter = iw * ih;
  return inter / (a.area() + b.area() - inter);
}

std::vector<MatchResult> match_detections(const std::vector<Box>& dets, const std::vector<Box>& gts,
                                          double iou_thresh, const std::vector<bool>& gt_ignored) {
  if (!gt_ignored.empty() && gt_ignored.size() != gts.size()) {
    throw std::invalid_argument("ignore flags do not match the ground-truth count");
  }
  auto ignored = [&](std::size_t g) { return !gt_ignored.empty() && gt_ignored[g]; };
  std::vector<bool> used(gts.size(), false);
  std::vector<MatchResult> out;
  out.reserve(dets.size());
  for (const auto& d : dets) {
    std::optional<std::size_t> best;
    double best_iou = 0;
    bool best_ignored = true;
    for (std::size_t g = 0; g < gts.size(); ++g) {
      if (used[g]) continue;
      const double v = iou(d, gts[g]);
      if (v < iou_thresh) continue;
      const bool ig = ignored(g);
      if (!best || (best_ignored && !ig) || (best_ignored == ig && v > best_iou)) {
        best = g;
        best_iou = v;
        best_ignored = ig;
      }
    }
    if (!best) {
      out.push_back(MatchResult::fp);
    } else {
      used[*best] = true;
      out.push_back(best_ignored ? MatchResult::ignored : MatchResult::tp);
    }
  }
  return out;
}

std::optional<double> average_precision(const std::vector<bool>& tp, std::size_t n_gt) {
  if (n_gt == 0) return std::nullopt;
  const std::size_t n = tp.size();
  std::vector<double> precision(n), recall(n);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < n; ++i) {
    hits += tp[i] ? 1 : 0;
    precision[i] = double(hits) / double(i + 1);
    recall[i] = double(hits) / double(n_gt);
  }
  for (std::size_t i = n; i-- > 1;) precision[i - 1] = std::max(precision[i - 1], precision[i]);
  double sum = 0;
  for (int r = 0; r <= 100; ++r) {
    const double level = double(r) / 100.0;
    const auto it = std::lower_bound(recall.begin(), recall.end(), level);
    if (it != recall.end()) sum += precision[std::size_t(it - recall.begin())];
  }
  return sum / 101.0;
}

ApResult map_evaluate(const std::vector<Box>& dets, const std::vector<Box>& gts, SizeFilter filter) {
  std::set<std::string> images;
  std::set<int> classes;
  for (const auto& g : gts) {
    g.validate();
    images.insert(g.image_id);
    classes.insert(g.class_id);
  }
  for (const auto& d : dets) {
    d.validate();
    if (!d.score) throw std::invalid_argument("detection without a score");
    if (!images.count(d.image_id)) throw std::invalid_argument("detection references unknown image " + d.image_id);
  }

  // Detections in descending score order, ties in input order.
  std::vector<std::size_t> order(dets.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return *dets[a].score > *dets[b].score; });

  ApResult result;
  for (int cls : classes) {
    std::map<std::string, std::vector<Box>> gt_by_image;
    std::map<std::string, std::vector<bool>> ignore_by_image;
    std::size_t n_gt = 0;
    for (const auto& g : gts) {
      if (g.class_id != cls) continue;
      const bool ig = filter == SizeFilter::small && !(g.area() < kSmallArea);
      gt_by_image[g.image_id].push_back(g);
      ignore_by_image[g.image_id].push_back(ig);
      n_gt += ig ? 0 : 1;
    }
    if (n_gt == 0) continue;
    std::map<std::string, std::vector<std::size_t>> det_by_image;
    for (auto i : order)
      if (dets[i].class_id == cls) det_by_image[dets[i].image_id].push_back(i);

    std::array<double, 10> aps{};
    for (std::size_t t = 0; t < kIouThresholds.size(); ++t) {
      std::vector<std::optional<MatchResult>> flag(dets.size());
      for (const auto& [image, idx] : det_by_image) {
        std::vector<Box> ds;
        for (auto i : idx) ds.push_back(dets[i]);
        static const std::vector<Box> none;
        const auto git = gt_by_image.find(image);
        const auto& g = git == gt_by_image.end() ? none : git->second;
        const auto m = match_detections(ds, g, kIouThresholds[t],
                                        git == gt_by_image.end() ? std::vector<bool>{} : ignore_by_image[image]);
        for (std::size_t k = 0; k < idx.size(); ++k) flag[idx[k]] = m[k];
      }
      std::vector<bool> tp;
      for (auto i : order) {
        if (!flag[i] || *flag[i] == MatchResult::ignored) continue;
        tp.push_back(*flag[i] == MatchResult::tp);
      }
      aps[t] = *average_precision(tp, n_gt);
    }
    result.per_class[cls] = aps;
  }

  if (result.per_class.empty()) {
    result.per_threshold.fill(std::numeric_limits<double>::quiet_NaN());
    result.mean = std::numeric_limits<double>::quiet_NaN();
    return result;
  }
  double total = 0;
  for (std::size_t t = 0; t < kIouThresholds.size(); ++t) {
    double s = 0;
    for (const auto& [cls, aps] : result.per_class) s += aps[t];
    result.per_threshold[t] = s / double(result.per_class.size());
    total += result.per_threshold[t];
  }
  result.mean = total / double(kIouThresholds.size());
  return result;
}

namespace {

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream is(line);
  while (std::getline(is, cell, ',')) {
    const auto b = cell.find_first_not_of(" \t\r");
    const auto e = cell.find_last_not_of(" \t\r");
    out.push_back(b == std::string::npos ? "" : cell.substr(b, e - b + 1));
  }
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

double parse_number(const std::string& s, std::size_t line) {
  std::size_t pos = 0;
  double v = 0;
  try {
    v = std::stod(s, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (s.empty() || pos != s.size() || !std::isfinite(v)) {
    throw FormatError("line " + std::to_string(line) + ": '" + s + "' is not a number");
  }
  return v;
}

}  // namespace

std::vector<Box> read_boxes(std::istream& is, bool with_score) {
  std::vector<std::string> expected = {"image_id", "class_id", "x_min", "y_min", "x_max", "y_max"};
  if (with_score) expected.push_back("score");
  std::string line;
  if (!std::getline(is, line)) throw FormatError("missing CSV header");
  if (split_csv(line) != expected) throw FormatError("unexpected CSV header '" + line + "'");
  std::vector<Box> boxes;
  std::size_t lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const auto cells = split_csv(line);
    if (cells.size() != expected.size()) {
      throw FormatError("line " + std::to_string(lineno) + ": expected " + std::to_string(expected.size()) +
                        " fields, got " + std::to_string(cells.size()));
    }
    Box b;
    b.image_id = cells[0];
    const double cls = parse_number(cells[1], lineno);
    if (cls != std::floor(cls)) throw FormatError("line " + std::to_string(lineno) + ": class id must be an integer");
    b.class_id = int(cls);
    b.x_min = parse_number(cells[2], lineno);
    b.y_min = parse_number(cells[3], lineno);
    b.x_max = parse_number(cells[4], lineno);
    b.y_max = parse_number(cells[5], lineno);
    if (with_score) b.score = parse_number(cells[6], lineno);
    try {
      b.validate();
    } catch (const std::invalid_argument& e) {
      throw FormatError("line " + std::to_string(lineno) + ": " + e.what());
    }
    boxes.push_back(std::move(b));
  }
  return boxes;
}

std::vector<Box> read_boxes(const std::filesystem::path& path, bool with_score) {
  std::ifstream is(path);
  if (!is) throw FormatError("cannot open " + path.string());
  try {
    return read_boxes(is, with_score);
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

void write_boxes(std::ostream& os, const std::vector<Box>& boxes) {
  const bool with_score = !boxes.empty() && boxes.front().score.has_value();
  os << "image_id,class_id,x_min,y_min,x_max,y_max" << (with_score ? ",score" : "") << '\n';
  os << std::setprecision(17);
  for (const auto& b : boxes) {
    os << b.image_id << ',' << b.class_id << ',' << b.x_min << ',' << b.y_min << ',' << b.x_max << ',' << b.y_max;
    if (with_score) os << ',' << b.score.value_or(0.0);
    os << '\n';
  }
}

}  // namespace mamat::eval

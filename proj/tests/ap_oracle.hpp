#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <random>
#include <set>
#include <string>
#include <tuple>
#include <vector>

#include "mamat/eval.hpp"

namespace mamat::eval::testing {

inline Box gt(std::string img, int cls, double x0, double y0, double x1, double y1) {
  return {img, cls, x0, y0, x1, y1, {}};
}
inline Box det(std::string img, int cls, double x0, double y0, double x1, double y1, double s) {
  return {img, cls, x0, y0, x1, y1, s};
}

// Independent oracle: per image, every injective assignment of detections to
// ground truth is enumerated and the lexicographically best one in score order
// (counted match > ignored match > none, then IoU, then earlier box) is kept;
// AP is the 101-point mean of the best precision over prefixes reaching each recall.
struct Oracle {
  static double ap(const std::vector<bool>& tp, std::size_t n_gt) {
    double sum = 0;
    for (int r = 0; r <= 100; ++r) {
      double best = 0;
      std::size_t hits = 0;
      for (std::size_t k = 0; k < tp.size(); ++k) {
        hits += tp[k];
        if (hits * 100 >= std::size_t(r) * n_gt) {
          best = std::max(best, double(hits) / double(k + 1));
        }
      }
      sum += best;
    }
    return sum / 101.0;
  }

  // Returns, per detection, 0 = FP, 1 = ignored, 2 = TP.
  static std::vector<int> assign(const std::vector<Box>& d, const std::vector<Box>& g, const std::vector<bool>& ig,
                                 double t) {
    using Key = std::vector<std::tuple<int, double, int>>;
    Key best_key;
    std::vector<int> best;
    bool found = false;
    std::vector<int> choice(d.size(), -1);
    std::vector<bool> used(g.size(), false);
    std::function<void(std::size_t)> rec = [&](std::size_t i) {
      if (i == d.size()) {
        Key key;
        std::vector<int> res;
        for (std::size_t k = 0; k < d.size(); ++k) {
          if (choice[k] < 0) {
            key.emplace_back(0, 0.0, 0);
            res.push_back(0);
          } else {
            const int tier = ig[choice[k]] ? 1 : 2;
            key.emplace_back(tier, iou(d[k], g[choice[k]]), -choice[k]);
            res.push_back(tier);
          }
        }
        if (!found || key > best_key) {
          found = true;
          best_key = key;
          best = res;
        }
        return;
      }
      choice[i] = -1;
      rec(i + 1);
      for (std::size_t j = 0; j < g.size(); ++j) {
        if (used[j] || iou(d[i], g[j]) < t) continue;
        used[j] = true;
        choice[i] = int(j);
        rec(i + 1);
        used[j] = false;
        choice[i] = -1;
      }
    };
    rec(0);
    return best;
  }

  static double map(const std::vector<Box>& d, const std::vector<Box>& g, bool small) {
    std::set<int> classes;
    std::set<std::string> images;
    for (const auto& b : g) {
      classes.insert(b.class_id);
      images.insert(b.image_id);
    }
    std::vector<std::size_t> order(d.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return *d[a].score > *d[b].score; });
    double total = 0;
    int counted = 0;
    for (int cls : classes) {
      std::size_t n_gt = 0;
      for (const auto& b : g) n_gt += b.class_id == cls && (!small || b.area() < 1024.0);
      if (n_gt == 0) continue;
      ++counted;
      double class_sum = 0;
      for (int ti = 0; ti < 10; ++ti) {
        std::vector<int> status(d.size(), -1);
        for (const auto& img : images) {
          std::vector<Box> ds, gs;
          std::vector<std::size_t> idx;
          std::vector<bool> ig;
          for (auto i : order)
            if (d[i].class_id == cls && d[i].image_id == img) {
              ds.push_back(d[i]);
              idx.push_back(i);
            }
          for (const auto& b : g)
            if (b.class_id == cls && b.image_id == img) {
              gs.push_back(b);
              ig.push_back(small && !(b.area() < 1024.0));
            }
          const auto a = assign(ds, gs, ig, kIouThresholds[ti]);
          for (std::size_t k = 0; k < idx.size(); ++k) status[idx[k]] = a[k];
        }
        std::vector<bool> tp;
        for (auto i : order)
          if (status[i] == 0 || status[i] == 2) tp.push_back(status[i] == 2);
        class_sum += ap(tp, n_gt);
      }
      total += class_sum / 10.0;
    }
    return counted ? total / counted : std::nan("");
  }
};

inline std::pair<std::vector<Box>, std::vector<Box>> random_instance(std::mt19937_64& rng) {
  std::uniform_int_distribution<int> count(0, 4), cls(0, 1), coord(0, 12), size(2, 8), score(1, 8);
  std::uniform_real_distribution<double> jitter(-1.5, 1.5);
  std::uniform_real_distribution<double> scale(1.0, 6.0);
  std::vector<Box> g, d;
  for (int img = 0; img < 5; ++img) {
    const std::string id = "img" + std::to_string(img);
    const int ng = std::max(1, count(rng)), nd = count(rng);
    for (int k = 0; k < ng; ++k) {
      const double s = scale(rng);
      const double x = coord(rng) * s, y = coord(rng) * s;
      g.push_back(gt(id, cls(rng), x, y, x + size(rng) * s, y + size(rng) * s));
    }
    for (int k = 0; k < nd; ++k) {
      const auto& base = g[g.size() - 1 - std::size_t(k % ng)];
      const double w = base.x_max - base.x_min, h = base.y_max - base.y_min;
      const double x0 = base.x_min + jitter(rng) * w / 4, y0 = base.y_min + jitter(rng) * h / 4;
      // Scores on a coarse grid so ties occur.
      d.push_back(det(id, k % 3 == 2 ? cls(rng) : base.class_id, x0, y0, x0 + w * (0.7 + 0.2 * jitter(rng)),
                      y0 + h * (0.7 + 0.2 * jitter(rng)), score(rng) / 8.0));
    }
  }
  return {d, g};
}

}  // namespace mamat::eval::testing

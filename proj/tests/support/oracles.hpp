#pragma once

// Brute-force reference implementations used to check the optimised code.
// Written for clarity, not speed; only run on small inputs.

#include <algorithm>
#include <cstdint>
#include <functional>
#include <map>
#include <random>
#include <set>
#include <tuple>
#include <vector>

#include "glandseg/image.hpp"

namespace oracle {

using glandseg::BinaryMask;
using glandseg::LabelMap;

/// contour(p) = 1 iff some pixel within Chebyshev distance bw carries another label.
inline BinaryMask contour(const LabelMap& m, int bw) {
  BinaryMask out(m.height(), m.width());
  for (int y = 0; y < m.height(); ++y) {
    for (int x = 0; x < m.width(); ++x) {
      bool edge = false;
      for (int dy = -bw; dy <= bw && !edge; ++dy) {
        for (int dx = -bw; dx <= bw && !edge; ++dx) {
          const int yy = y + dy, xx = x + dx;
          if (yy < 0 || xx < 0 || yy >= m.height() || xx >= m.width()) continue;
          edge = m.at(yy, xx) != m.at(y, x);
        }
      }
      out.at(y, x) = edge ? 1 : 0;
    }
  }
  return out;
}

/// Recursive-style flood fill with an explicit stack; labels in row-major seed order.
inline LabelMap flood_components(const BinaryMask& mask, int connectivity, int* count = nullptr) {
  LabelMap out(mask.height(), mask.width());
  int next = 0;
  for (int y = 0; y < mask.height(); ++y) {
    for (int x = 0; x < mask.width(); ++x) {
      if (!mask.at(y, x) || out.at(y, x)) continue;
      ++next;
      std::vector<std::pair<int, int>> stack{{y, x}};
      out.at(y, x) = next;
      while (!stack.empty()) {
        const auto [cy, cx] = stack.back();
        stack.pop_back();
        for (int dy = -1; dy <= 1; ++dy) {
          for (int dx = -1; dx <= 1; ++dx) {
            if (dy == 0 && dx == 0) continue;
            if (connectivity == 4 && dy != 0 && dx != 0) continue;
            const int ny = cy + dy, nx = cx + dx;
            if (ny < 0 || nx < 0 || ny >= mask.height() || nx >= mask.width()) continue;
            if (!mask.at(ny, nx) || out.at(ny, nx)) continue;
            out.at(ny, nx) = next;
            stack.push_back({ny, nx});
          }
        }
      }
    }
  }
  if (count) *count = next;
  return out;
}

inline double pixel_dice(const BinaryMask& p, const BinaryMask& g) {
  long inter = 0, sp = 0, sg = 0;
  for (int y = 0; y < p.height(); ++y) {
    for (int x = 0; x < p.width(); ++x) {
      const bool a = p.at(y, x) != 0, b = g.at(y, x) != 0;
      inter += a && b;
      sp += a;
      sg += b;
    }
  }
  return sp + sg == 0 ? 1.0 : 2.0 * inter / static_cast<double>(sp + sg);
}

inline std::set<int> labels_of(const LabelMap& m) {
  std::set<int> s;
  for (int y = 0; y < m.height(); ++y) {
    for (int x = 0; x < m.width(); ++x) {
      if (m.at(y, x) > 0) s.insert(m.at(y, x));
    }
  }
  return s;
}

inline long area(const LabelMap& m, int label) {
  long n = 0;
  for (int y = 0; y < m.height(); ++y) {
    for (int x = 0; x < m.width(); ++x) n += m.at(y, x) == label;
  }
  return n;
}

inline long intersection(const LabelMap& a, int la, const LabelMap& b, int lb) {
  long n = 0;
  for (int y = 0; y < a.height(); ++y) {
    for (int x = 0; x < a.width(); ++x) n += a.at(y, x) == la && b.at(y, x) == lb;
  }
  return n;
}

/// Greedy matching: repeatedly take the unmatched pair with the highest IoU
/// (> thr), lowest (pred, gt) label on ties. Returns the true-positive count.
inline int greedy_true_positives(const LabelMap& pred, const LabelMap& gt, double thr) {
  std::set<int> free_p = labels_of(pred), free_g = labels_of(gt);
  int tp = 0;
  for (;;) {
    double best = -1.0;
    int bp = 0, bg = 0;
    for (const int p : free_p) {
      for (const int g : free_g) {
        const long in = intersection(pred, p, gt, g);
        if (in == 0) continue;
        const double iou = in / static_cast<double>(area(pred, p) + area(gt, g) - in);
        if (iou > thr && iou > best) {
          best = iou;
          bp = p;
          bg = g;
        }
      }
    }
    if (best < 0.0) return tp;
    ++tp;
    free_p.erase(bp);
    free_g.erase(bg);
  }
}

inline double object_f1(const LabelMap& pred, const LabelMap& gt, double thr) {
  const double np = static_cast<double>(labels_of(pred).size());
  const double ng = static_cast<double>(labels_of(gt).size());
  if (np == 0 && ng == 0) return 1.0;
  const int tp = greedy_true_positives(pred, gt, thr);
  const double p = np > 0 ? tp / np : 0.0, r = ng > 0 ? tp / ng : 0.0;
  return p + r > 0 ? 2 * p * r / (p + r) : 0.0;
}

/// Maximum-cardinality matching among pairs with IoU > thr (exhaustive search).
inline int optimal_true_positives(const LabelMap& pred, const LabelMap& gt, double thr) {
  const auto ps = labels_of(pred), gs = labels_of(gt);
  std::vector<int> pv(ps.begin(), ps.end()), gv(gs.begin(), gs.end());
  std::vector<std::vector<bool>> ok(pv.size(), std::vector<bool>(gv.size()));
  for (std::size_t i = 0; i < pv.size(); ++i) {
    for (std::size_t j = 0; j < gv.size(); ++j) {
      const long in = intersection(pred, pv[i], gt, gv[j]);
      ok[i][j] = in > 0 && in / static_cast<double>(area(pred, pv[i]) + area(gt, gv[j]) - in) > thr;
    }
  }
  std::vector<bool> used(gv.size());
  std::function<int(std::size_t)> go = [&](std::size_t i) -> int {
    if (i == pv.size()) return 0;
    int best = go(i + 1);
    for (std::size_t j = 0; j < gv.size(); ++j) {
      if (!ok[i][j] || used[j]) continue;
      used[j] = true;
      best = std::max(best, 1 + go(i + 1));
      used[j] = false;
    }
    return best;
  };
  return go(0);
}

/// sum over objects of A, weighted by area, of Dice with the B object of
/// largest intersection (ties: larger Dice).
inline double directed_object_dice(const LabelMap& a, const LabelMap& b) {
  const auto la = labels_of(a), lb = labels_of(b);
  long total = 0;
  for (const int l : la) total += area(a, l);
  double sum = 0.0;
  for (const int l : la) {
    long best_in = 0;
    double best_d = 0.0;
    for (const int m : lb) {
      const long in = intersection(a, l, b, m);
      if (in == 0) continue;
      const double d = 2.0 * in / static_cast<double>(area(a, l) + area(b, m));
      if (in > best_in || (in == best_in && d > best_d)) {
        best_in = in;
        best_d = d;
      }
    }
    sum += static_cast<double>(area(a, l)) / total * best_d;
  }
  return sum;
}

inline double object_dice(const LabelMap& pred, const LabelMap& gt) {
  const bool ep = labels_of(pred).empty(), eg = labels_of(gt).empty();
  if (ep && eg) return 1.0;
  if (ep || eg) return 0.0;
  return 0.5 * (directed_object_dice(gt, pred) + directed_object_dice(pred, gt));
}

/// Random label map built from a few random rectangles painted in sequence.
inline LabelMap random_label_map(std::mt19937_64& rng, int h, int w, int max_objects) {
  LabelMap m(h, w);
  std::uniform_int_distribution<int> n_obj(0, max_objects);
  const int n = n_obj(rng);
  for (int k = 1; k <= n; ++k) {
    std::uniform_int_distribution<int> ry(0, h - 1), rx(0, w - 1);
    int y0 = ry(rng), y1 = ry(rng), x0 = rx(rng), x1 = rx(rng);
    if (y0 > y1) std::swap(y0, y1);
    if (x0 > x1) std::swap(x0, x1);
    for (int y = y0; y <= y1; ++y) {
      for (int x = x0; x <= x1; ++x) m.at(y, x) = k;
    }
  }
  return m;
}

inline BinaryMask binarize(const LabelMap& m) {
  BinaryMask b(m.height(), m.width());
  for (int y = 0; y < m.height(); ++y) {
    for (int x = 0; x < m.width(); ++x) b.at(y, x) = m.at(y, x) > 0;
  }
  return b;
}

}  // namespace oracle

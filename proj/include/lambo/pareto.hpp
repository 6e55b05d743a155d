#pragma once

#include <algorithm>
#include <cstddef>
#include <stdexcept>
#include <vector>

#include "lambo/vocab.hpp"

namespace lambo::mo {

struct DimensionMismatch : std::runtime_error {
  DimensionMismatch() : std::runtime_error("objective vectors have different dimensions") {}
};
struct UnsupportedDimension : std::runtime_error {
  explicit UnsupportedDimension(std::size_t k)
      : std::runtime_error("exact hypervolume supports k in {2,3}, got k=" + std::to_string(k)) {}
};

using ObjectiveVector = std::vector<double>;

// maximization convention; strict Pareto dominance
inline bool dominates(const ObjectiveVector& a, const ObjectiveVector& b) {
  if (a.size() != b.size()) throw DimensionMismatch();
  bool strictly_better = false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i] < b[i]) return false;
    if (a[i] > b[i]) strictly_better = true;
  }
  return strictly_better;
}

// indices of the maximal elements; duplicates of a frontier point all retained
inline std::vector<std::size_t> pareto_front(const std::vector<ObjectiveVector>& points) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < points.size(); ++i) {
    bool dominated = false;
    for (std::size_t j = 0; j < points.size() && !dominated; ++j)
      if (j != i && dominates(points[j], points[i])) dominated = true;
    if (!dominated) out.push_back(i);
  }
  return out;
}

namespace detail {

// 2D hypervolume of points already clipped at the origin (ref at 0)
inline double hv2(std::vector<std::pair<double, double>> pts) {
  std::stable_sort(pts.begin(), pts.end(),
                   [](const auto& a, const auto& b) { return a.first > b.first; });
  double vol = 0.0, covered_y = 0.0;
  for (const auto& [x, y] : pts) {
    if (y > covered_y) {
      vol += x * (y - covered_y);
      covered_y = y;
    }
  }
  return vol;
}

}  // namespace detail

// Lebesgue measure of the union of boxes [ref, p]; k = 2 or 3
inline double hypervolume(const std::vector<ObjectiveVector>& points, const ObjectiveVector& ref) {
  const std::size_t k = ref.size();
  if (k != 2 && k != 3) throw UnsupportedDimension(k);
  std::vector<ObjectiveVector> clipped;
  for (const auto& p : points) {
    if (p.size() != k) throw DimensionMismatch();
    ObjectiveVector q(k);
    bool positive = true;
    for (std::size_t i = 0; i < k; ++i) {
      q[i] = p[i] - ref[i];
      if (q[i] <= 0.0) positive = false;
    }
    if (positive) clipped.push_back(std::move(q));  // boxes with zero extent add nothing
  }
  if (clipped.empty()) return 0.0;

  if (k == 2) {
    std::vector<std::pair<double, double>> pts;
    for (const auto& q : clipped) pts.emplace_back(q[0], q[1]);
    return detail::hv2(std::move(pts));
  }

  // k = 3: sweep slabs of the third coordinate from the top
  std::vector<double> zs;
  for (const auto& q : clipped) zs.push_back(q[2]);
  std::sort(zs.begin(), zs.end(), std::greater<>());
  zs.erase(std::unique(zs.begin(), zs.end()), zs.end());
  zs.push_back(0.0);
  double vol = 0.0;
  for (std::size_t s = 0; s + 1 < zs.size(); ++s) {
    const double ztop = zs[s], zbot = zs[s + 1];
    std::vector<std::pair<double, double>> slab;
    for (const auto& q : clipped)
      if (q[2] >= ztop) slab.emplace_back(q[0], q[1]);
    vol += (ztop - zbot) * detail::hv2(std::move(slab));
  }
  return vol;
}

struct ArchiveEntry {
  seq::TokenSequence x;
  ObjectiveVector y;
};

// Non-dominated archive with a fixed reference point and cached hypervolume.
class ParetoArchive {
 public:
  explicit ParetoArchive(ObjectiveVector ref) : ref_(std::move(ref)) {}

  void insert(ArchiveEntry e) {
    for (const auto& m : members_)
      if (dominates(m.y, e.y)) return;
    std::vector<ArchiveEntry> kept;
    for (auto& m : members_)
      if (!dominates(e.y, m.y)) kept.push_back(std::move(m));
    kept.push_back(std::move(e));
    members_ = std::move(kept);
    dirty_ = true;
  }

  void insert_batch(const std::vector<ArchiveEntry>& es) {
    for (const auto& e : es) insert(e);
  }

  const std::vector<ArchiveEntry>& members() const { return members_; }
  const ObjectiveVector& ref() const { return ref_; }

  double hypervolume() const {
    if (dirty_) {
      std::vector<ObjectiveVector> pts;
      for (const auto& m : members_) pts.push_back(m.y);
      hv_ = mo::hypervolume(pts, ref_);
      dirty_ = false;
    }
    return hv_;
  }

 private:
  ObjectiveVector ref_;
  std::vector<ArchiveEntry> members_;
  mutable double hv_ = 0.0;
  mutable bool dirty_ = true;
};

}  // namespace lambo::mo

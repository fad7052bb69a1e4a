#pragma once

#include <array>
#include <string>
#include <vector>

#include "biomoe/errors.hpp"

namespace biomoe {

using Vec3 = std::array<double, 3>;

/// One labeled 3-D landmark point.
struct Landmark {
  std::string region;
  double u = 0.0, v = 0.0, z = 0.0;
};

/// Region labels every set must carry (extra labels are allowed and are
/// never touched by blending).
extern const std::array<const char*, 8> kRequiredRegions;

struct LandmarkSet {
  std::vector<Landmark> points;

  /// Throws unless every required region is present, non-empty and finite.
  void validate() const;
  /// Mean position of a region's points. Throws if the region is empty.
  Vec3 centroid(const std::string& region) const;
  bool has_region(const std::string& region) const;
};

/// Oriented vertical facial direction: total-least-squares line through the
/// eye midpoint, nose tip and mouth center, pointing from eyes toward mouth.
struct FacialAxis {
  Vec3 origin{};
  Vec3 direction{};
};

FacialAxis fit_vertical_axis(const LandmarkSet& lm);

/// Region translations that give `a` the facial proportions of `b`: the
/// projected nose-to-mouth and nose-to-eye distances along the vertical axis
/// and the inter-pupil distance. Only the mouth and eye/eyebrow/pupil
/// regions move; everything else is returned bit-identical.
LandmarkSet blend_landmarks(const LandmarkSet& a, const LandmarkSet& b);

/// Orthographic projection: drops the z coordinate.
LandmarkSet project_2d(const LandmarkSet& lm);

/// Text I/O, one `region u v z` record per line; '#' starts a comment.
LandmarkSet read_landmark_file(const std::string& path);
void write_landmark_file(const std::string& path, const LandmarkSet& lm);

}  // namespace biomoe

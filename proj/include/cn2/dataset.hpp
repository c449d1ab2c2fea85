#pragma once
// In-memory minute-level dataset: frame groups paired with one ground truth per minute.

#include <cstdint>
#include <string>
#include <vector>

#include "cn2/error.hpp"
#include "cn2/gradient_estimator.hpp"
#include "cn2/imaging.hpp"

namespace cn2 {

struct MinuteData {
  std::int64_t minute_timestamp_us = 0;
  double truth = 0.0;  // m^(-2/3)
  std::vector<ImageSequence> groups;
};

struct Dataset {
  std::string id;
  CameraGeometry geom{};
  std::vector<MinuteData> minutes;  // strictly increasing minute timestamps

  void validate() const {
    geom.validate();
    for (std::size_t i = 0; i < minutes.size(); ++i) {
      if (!(minutes[i].truth > 0)) fail(ErrorKind::Validation, "dataset '" + id + "': ground truth must be > 0");
      if (i > 0 && minutes[i].minute_timestamp_us <= minutes[i - 1].minute_timestamp_us)
        fail(ErrorKind::Validation, "dataset '" + id + "': minutes must be strictly increasing");
    }
  }

  std::size_t group_count() const {
    std::size_t n = 0;
    for (const auto& m : minutes) n += m.groups.size();
    return n;
  }
};

}  // namespace cn2

#pragma once

#include <cstddef>
#include <vector>

namespace dphoi {

// Dense image, HWC layout, values nominally in [0, 1].
struct Image {
  int height = 0;
  int width = 0;
  int channels = 0;
  std::vector<double> pixels;

  Image() = default;
  Image(int h, int w, int c) : height(h), width(w), channels(c), pixels(static_cast<std::size_t>(h) * w * c, 0.0) {}

  [[nodiscard]] double& at(int y, int x, int c) {
    return pixels[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }
  [[nodiscard]] double at(int y, int x, int c) const {
    return pixels[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }
  [[nodiscard]] bool empty() const { return pixels.empty(); }

  friend bool operator==(const Image&, const Image&) = default;
};

}  // namespace dphoi

#pragma once

#include <vector>

#include "cpmlho/tensor.hpp"

namespace cpmlho {

/// Images [N x C x H x W] scaled to [0, 1] with their class labels.
struct Batch {
  Tensor x;
  std::vector<int> y;

  std::size_t size() const noexcept { return y.size(); }
};

}  // namespace cpmlho

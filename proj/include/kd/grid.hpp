#pragma once

#include <cstdint>
#include <vector>

namespace kd {

// Small row-major 2-D container for per-position integers and flags.
template <class U>
struct Grid {
  std::int64_t rows = 0;
  std::int64_t cols = 0;
  std::vector<U> values;

  Grid() = default;
  Grid(std::int64_t r, std::int64_t c, U fill = U{})
      : rows(r), cols(c), values(static_cast<std::size_t>(r * c), fill) {}

  U at(std::int64_t r, std::int64_t c) const { return values[static_cast<std::size_t>(r * cols + c)]; }
  U& at(std::int64_t r, std::int64_t c) { return values[static_cast<std::size_t>(r * cols + c)]; }

  bool operator==(const Grid&) const = default;
};

using Mask = Grid<std::uint8_t>;
using TargetGrid = Grid<std::int32_t>;

}  // namespace kd

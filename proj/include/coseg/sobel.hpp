#pragma once

namespace coseg {

// Unnormalized 3x3 Sobel kernels, row-major. gx responds to horizontal (x)
// change, gy to vertical (y) change. Shared by the MSGE loss and the
// watershed post-processing.
inline constexpr double kSobelX[9] = {-1, 0, 1, -2, 0, 2, -1, 0, 1};
inline constexpr double kSobelY[9] = {-1, -2, -1, 0, 0, 0, 1, 2, 1};

}  // namespace coseg

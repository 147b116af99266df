#pragma once

// Reference row-percentage confusion matrices for the clean (A) and
// perturbed (B) datasets, rows = true class C1..C10.

#include <array>

namespace pqe::testing {

inline constexpr std::array<double, 100> kMatrixA = {
    100,  0, 0,     0,    0,     0,   0,    0,     0,     0,     //
    0,    100, 0,   0,    0,     0,   0,    0,     0,     0,     //
    0,    0, 99.95, 0,    0,     0,   0.05, 0,     0,     0,     //
    0.2,  0, 0,     99.75, 0,    0,   0,    0.05,  0,     0,     //
    0.05, 0, 0.05,  0.15, 99.75, 0,   0,    0,     0,     0,     //
    0,    0, 0,     0,    0,     100, 0,    0,     0,     0,     //
    0,    0, 0,     0,    0,     0,   100,  0,     0,     0,     //
    0,    0, 0,     0.93, 0,     0,   0,    99.07, 0,     0,     //
    0,    0, 0,     0,    0,     0,   0.29, 0,     99.71, 0,     //
    0,    0, 0,     0.1,  0,     0,   0,    0,     0,     99.9,  //
};

inline constexpr std::array<double, 100> kMatrixB = {
    68.25, 0,    0.05,  6.73,  0.05,  0,    0.3,   24.58, 0,     0.05,   //
    0,     100,  0,     0,     0,     0,    0,     0,     0,     0,      //
    0,     0,    97.57, 0.1,   0.4,   0,    1.93,  0,     0,     0,      //
    1.78,  0,    0,     96.94, 0,     0.05, 0.15,  0.99,  0.05,  0.05,   //
    0.41,  0,    0.41,  1.17,  97.76, 0,    0,     0.25,  0,     0,      //
    0.05,  0,    0,     0.15,  0,     99.8, 0,     0,     0,     0,      //
    0.25,  0,    0.45,  0.6,   0,     0,    98.61, 0,     0.1,   0,      //
    27.98, 0,    0.05,  11.23, 0,     0.05, 0.15,  60.48, 0,     0.05,   //
    0.05,  0.1,  0,     0.05,  0,     0,    2.24,  0,     96.98, 0.58,   //
    0.34,  0.59, 0,     0.74,  0,     0,    0,     0.1,   0.34,  97.88,  //
};

// Every two-decimal percentage is a whole count at this size.
inline constexpr unsigned kCountsPerClass = 10000;

}  // namespace pqe::testing

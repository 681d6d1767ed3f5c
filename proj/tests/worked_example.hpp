#pragma once

// The 3x3 worked example used throughout the MSQE tests.

#include "po2q/tensor.hpp"

namespace testdata {

inline po2q::RealTensor worked_example_matrix() {
  return po2q::RealTensor(po2q::Shape{3, 3},
                          std::vector<double>{-0.17, 2.58, -8.75, -3.56, 1.56, -0.15, 2.15, -0.66, 0.49});
}

}  // namespace testdata

#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "obd/matrix.hpp"

namespace obd {

// One named tensor staged for serialization. Matrices are written row-major
// with no padding; dtype controls the on-disk element width. Reading an f32
// tensor widens exactly (every f32 is representable as f64).
struct NamedTensor {
    std::string name;
    Matrix value;
    std::string dtype = "f64";  // "f32" or "f64"
};

// Writes manifest.json plus one little-endian binary blob per tensor into
// the directory, creating it if needed. Names must be unique and non-empty.
void write_tensors(const std::string& directory, const std::vector<NamedTensor>& tensors);

// Reads every tensor listed in directory/manifest.json. Declared byte
// lengths are checked against the blob on disk; a mismatch names the tensor.
std::vector<NamedTensor> read_tensors(const std::string& directory);

}  // namespace obd

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cpdiff/array.hpp"

namespace cpdiff {

enum class Provenance : uint8_t { kHarvested, kSoup, kGenerated, kInterpolated, kReconstructed };

const char* provenance_name(Provenance p);
Provenance provenance_from_name(const std::string& s);

// One adapted layer: A is (r x k), B is (d x r), both row-major.
struct LoraLayer {
    int layer_id = 0;
    Array a;
    Array b;
};

struct LoraAdapter {
    std::vector<LoraLayer> layers;
    int rank = 1;
    float alpha = 1.0f;
};

struct LayoutEntry {
    int layer_id = 0;
    char role = 'A';  // 'A' or 'B'
    int rows = 0;
    int cols = 0;
    int64_t offset = 0;
};

// Fixed flattening order: ascending layer_id, A before B, row-major inside
// each matrix. Entries tile [0, total_length) without gaps.
struct LayoutDescriptor {
    std::vector<LayoutEntry> entries;
    int64_t total_length = 0;

    // dims: per layer (layer_id, d, k)
    static LayoutDescriptor make(const std::vector<std::array<int, 3>>& dims, int rank);
    bool operator==(const LayoutDescriptor& o) const;
    void validate() const;
};

struct ParameterVector {
    std::vector<float> values;
    LayoutDescriptor layout;
    Provenance provenance = Provenance::kHarvested;
};

// y = W0 x + (alpha/r) * B (A x)
std::vector<float> lora_forward(const Array& w0, const LoraLayer& layer, float alpha, int rank,
                                const std::vector<float>& x);

// W' = W0 + (alpha/r) * B A
Array merge(const Array& w0, const LoraLayer& layer, float alpha, int rank);

ParameterVector flatten(const LoraAdapter& adapter, const LayoutDescriptor& layout);
LoraAdapter unflatten(const ParameterVector& vec, const LayoutDescriptor& layout, float alpha);

}  // namespace cpdiff

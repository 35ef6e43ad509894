#pragma once

// Binary checkpoint container: magic "DMSK", u32 version = 1, named sections
// each holding a table of (name, shape, f32 payload) tensors, trailing CRC32
// over all preceding bytes.

#include <cstdint>
#include <string>
#include <vector>

#include "dmsk/tensor.hpp"

namespace dmsk {

struct TensorRecord {
    std::string name;
    std::vector<int> shape;
    std::vector<float> data;
};

struct CheckpointSection {
    std::string name;
    std::vector<TensorRecord> tensors;

    void put(const std::string& tensor_name, const Tensor& t);
    void put_values(const std::string& tensor_name, const std::vector<float>& values);
    const TensorRecord* find(const std::string& tensor_name) const;
    // Throws CheckpointError when missing. Result is a fresh leaf tensor.
    Tensor get(const std::string& tensor_name, bool requires_grad = false) const;
    float get_value(const std::string& tensor_name) const;
};

struct Checkpoint {
    std::vector<CheckpointSection> sections;

    CheckpointSection& add(const std::string& name);       // rejects duplicates
    CheckpointSection* find(const std::string& name);
    const CheckpointSection* find(const std::string& name) const;
    bool has(const std::string& name) const { return find(name) != nullptr; }

    std::vector<uint8_t> serialize() const;  // includes trailing CRC
    uint32_t content_crc() const;
    void save(const std::string& path) const;
    static Checkpoint load(const std::string& path);
};

}  // namespace dmsk

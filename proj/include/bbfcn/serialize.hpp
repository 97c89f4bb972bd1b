#pragma once

#include <zlib.h>

#include <cstring>
#include <fstream>
#include <string>
#include <tuple>
#include <vector>

#include "bbfcn/net.hpp"
#include "bbfcn/tensor.hpp"

// Weight file format (little-endian throughout):
//   magic "BBFCN1" | format version u16 | K u16 | backbone layer count u16 |
//   tensors (rank u8, extents u32 each, float32 payload, row-major) |
//   CRC32 of all preceding bytes.
// Tensor order: per backbone layer in listing order W, bias, momentum(W),
// momentum(bias) (bias entries omitted for deconv and pooling layers), then
// the same for each of the K branches.

namespace bbfcn {

struct IncompatibleModelError : FormatError {
    using FormatError::FormatError;
};

namespace detail {

constexpr char kMagic[6] = {'B', 'B', 'F', 'C', 'N', '1'};
constexpr uint16_t kFormatVersion = 1;

inline void put_u16(std::vector<uint8_t>& out, uint16_t v) {
    out.push_back(static_cast<uint8_t>(v & 0xff));
    out.push_back(static_cast<uint8_t>(v >> 8));
}

inline void put_u32(std::vector<uint8_t>& out, uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<uint8_t>((v >> (8 * i)) & 0xff));
}

inline void put_tensor(std::vector<uint8_t>& out, const Tensor<float>& t) {
    out.push_back(static_cast<uint8_t>(t.rank()));
    for (int e : t.shape) put_u32(out, static_cast<uint32_t>(e));
    const size_t base = out.size();
    out.resize(base + t.data.size() * 4);
    static_assert(sizeof(float) == 4);
    std::memcpy(out.data() + base, t.data.data(), t.data.size() * 4);
}

class Reader {
public:
    Reader(const uint8_t* data, size_t size) : data_(data), size_(size) {}

    const uint8_t* take(size_t n) {
        if (pos_ + n > size_) throw FormatError("weight stream truncated");
        const uint8_t* p = data_ + pos_;
        pos_ += n;
        return p;
    }
    uint16_t u16() {
        const uint8_t* p = take(2);
        return static_cast<uint16_t>(p[0] | (p[1] << 8));
    }
    uint32_t u32() {
        const uint8_t* p = take(4);
        return static_cast<uint32_t>(p[0] | (p[1] << 8) | (p[2] << 16) |
                                     (static_cast<uint32_t>(p[3]) << 24));
    }
    Tensor<float> tensor() {
        const int rank = *take(1);
        if (rank < 1 || rank > 4) throw FormatError("weight stream has invalid tensor rank");
        std::vector<int> shape(static_cast<size_t>(rank));
        int64_t n = 1;
        for (int i = 0; i < rank; ++i) {
            const uint32_t e = u32();
            if (e == 0 || e > (1u << 24)) throw FormatError("weight stream has invalid extent");
            shape[static_cast<size_t>(i)] = static_cast<int>(e);
            n *= e;
        }
        Tensor<float> t(shape);
        const uint8_t* p = take(static_cast<size_t>(n) * 4);
        std::memcpy(t.data.data(), p, static_cast<size_t>(n) * 4);
        return t;
    }
    size_t pos() const { return pos_; }

private:
    const uint8_t* data_;
    size_t size_;
    size_t pos_ = 0;
};

inline void put_net(std::vector<uint8_t>& out, const Net& net) {
    for (const auto& p : net.params) {
        if (p.weights.size() == 0) continue;
        put_tensor(out, p.weights);
        if (p.bias.size() > 0) put_tensor(out, p.bias);
        put_tensor(out, p.weight_momentum);
        if (p.bias.size() > 0) put_tensor(out, p.bias_momentum);
    }
}

inline void check_shape(const Tensor<float>& t, const std::vector<int>& expected,
                        const char* what) {
    if (t.shape != expected)
        throw IncompatibleModelError(std::string("weight tensor shape mismatch for ") + what);
}

inline void read_net(Reader& r, Net& net, const char* what) {
    for (size_t i = 0; i < net.spec.size(); ++i) {
        LayerParams& p = net.params[i];
        if (p.weights.size() == 0) continue;
        const std::vector<int> wshape = p.weights.shape;
        const std::vector<int> bshape = p.bias.shape;
        p.weights = r.tensor();
        check_shape(p.weights, wshape, what);
        if (!bshape.empty()) {
            p.bias = r.tensor();
            check_shape(p.bias, bshape, what);
        }
        p.weight_momentum = r.tensor();
        check_shape(p.weight_momentum, wshape, what);
        if (!bshape.empty()) {
            p.bias_momentum = r.tensor();
            check_shape(p.bias_momentum, bshape, what);
        }
    }
}

}  // namespace detail

inline std::vector<uint8_t> serialize_weights(const BackboneWeights& backbone,
                                              const BranchWeights& branches,
                                              const NetworkConfig& config) {
    std::vector<uint8_t> out;
    out.insert(out.end(), detail::kMagic, detail::kMagic + 6);
    detail::put_u16(out, detail::kFormatVersion);
    detail::put_u16(out, static_cast<uint16_t>(config.landmark_types));
    detail::put_u16(out, static_cast<uint16_t>(backbone.net.spec.size()));
    detail::put_net(out, backbone.net);
    for (const auto& b : branches.branches) detail::put_net(out, b);
    const uint32_t crc = static_cast<uint32_t>(
        crc32(0, reinterpret_cast<const Bytef*>(out.data()), static_cast<uInt>(out.size())));
    detail::put_u32(out, crc);
    return out;
}

inline std::tuple<BackboneWeights, BranchWeights, NetworkConfig> deserialize_weights(
    const std::vector<uint8_t>& stream) {
    if (stream.size() < 6 || std::memcmp(stream.data(), detail::kMagic, 6) != 0)
        throw FormatError("not a weight file (bad magic)");
    if (stream.size() < 6 + 2 + 2 + 2 + 4) throw FormatError("weight stream truncated");

    const uint32_t stored_crc =
        static_cast<uint32_t>(stream[stream.size() - 4]) |
        (static_cast<uint32_t>(stream[stream.size() - 3]) << 8) |
        (static_cast<uint32_t>(stream[stream.size() - 2]) << 16) |
        (static_cast<uint32_t>(stream[stream.size() - 1]) << 24);
    const uint32_t actual_crc = static_cast<uint32_t>(crc32(
        0, reinterpret_cast<const Bytef*>(stream.data()), static_cast<uInt>(stream.size() - 4)));
    if (stored_crc != actual_crc) throw FormatError("weight stream CRC mismatch");

    detail::Reader r(stream.data(), stream.size() - 4);
    r.take(6);
    const uint16_t version = r.u16();
    if (version != detail::kFormatVersion) throw FormatError("unsupported weight format version");
    const uint16_t k_types = r.u16();
    if (k_types == 0) throw FormatError("weight stream declares K = 0");
    const uint16_t layer_count = r.u16();

    NetworkConfig config;
    config.landmark_types = k_types;
    if (k_types != 5) {
        config.landmark_names.clear();
        for (int k = 0; k < k_types; ++k) config.landmark_names.push_back("L" + std::to_string(k));
    }
    auto [backbone, branches] = init_weights(config, 0);
    if (layer_count != backbone.net.spec.size())
        throw IncompatibleModelError("backbone layer count does not match the architecture");

    detail::read_net(r, backbone.net, "backbone");
    for (size_t k = 0; k < branches.branches.size(); ++k)
        detail::read_net(r, branches.branches[k], "branch");
    if (r.pos() != stream.size() - 4) throw FormatError("weight stream has trailing bytes");
    return {std::move(backbone), std::move(branches), std::move(config)};
}

inline void save_weights_file(const std::string& path, const BackboneWeights& backbone,
                              const BranchWeights& branches, const NetworkConfig& config) {
    const std::vector<uint8_t> bytes = serialize_weights(backbone, branches, config);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot open weight file for writing: " + path);
    out.write(reinterpret_cast<const char*>(bytes.data()),
              static_cast<std::streamsize>(bytes.size()));
    if (!out) throw DataError("failed writing weight file: " + path);
}

inline std::tuple<BackboneWeights, BranchWeights, NetworkConfig> load_weights_file(
    const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open weight file: " + path);
    std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                               std::istreambuf_iterator<char>());
    return deserialize_weights(bytes);
}

}  // namespace bbfcn

#pragma once

// Tensor container used for checkpoints and cue dumps.
//
// Layout:
//   bytes [0, 8)    magic "MCANTNSR"
//   bytes [8, 16)   header length N, unsigned 64-bit little-endian
//   bytes [16, 16+N) UTF-8 JSON header:
//                   {"meta": {...}, "tensors": [{"name", "shape", "offset"}...]}
//   remainder       float32 little-endian payloads in manifest order;
//                   "offset" is the byte offset from the start of the payload.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace mcan {

class TensorFileError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct NamedTensor {
    std::string name;
    std::vector<std::int64_t> shape;
    std::vector<float> values;

    std::int64_t numel() const {
        std::int64_t n = 1;
        for (auto d : shape) n *= d;
        return n;
    }
};

struct TensorFile {
    nlohmann::json meta = nlohmann::json::object();
    std::vector<NamedTensor> tensors;

    const NamedTensor& get(const std::string& name) const {
        for (const auto& t : tensors)
            if (t.name == name) return t;
        throw TensorFileError("tensor '" + name + "' not present");
    }
};

inline constexpr char kTensorMagic[8] = {'M', 'C', 'A', 'N', 'T', 'N', 'S', 'R'};

inline std::vector<unsigned char> encode_tensor_file(const TensorFile& file) {
    nlohmann::json manifest = nlohmann::json::array();
    std::uint64_t offset = 0;
    for (const auto& t : file.tensors) {
        if (std::int64_t(t.values.size()) != t.numel())
            throw TensorFileError("tensor '" + t.name + "' has " + std::to_string(t.values.size()) +
                                  " values but shape implies " + std::to_string(t.numel()));
        manifest.push_back({{"name", t.name}, {"shape", t.shape}, {"offset", offset}});
        offset += t.values.size() * 4;
    }
    const std::string header = nlohmann::json{{"meta", file.meta}, {"tensors", manifest}}.dump();

    const std::uint64_t n = header.size();
    std::vector<unsigned char> out(16 + header.size() + offset);
    std::memcpy(out.data(), kTensorMagic, 8);
    for (int i = 0; i < 8; ++i) out[std::size_t(8 + i)] = static_cast<unsigned char>((n >> (8 * i)) & 0xff);
    std::memcpy(out.data() + 16, header.data(), header.size());
    std::size_t pos = 16 + header.size();
    for (const auto& t : file.tensors)
        for (float v : t.values) {
            const auto bits = std::bit_cast<std::uint32_t>(v);
            for (int i = 0; i < 4; ++i) out[pos++] = static_cast<unsigned char>((bits >> (8 * i)) & 0xff);
        }
    return out;
}

inline TensorFile decode_tensor_file(const std::vector<unsigned char>& bytes, const std::string& origin = "<memory>") {
    if (bytes.size() < 16 || std::memcmp(bytes.data(), kTensorMagic, 8) != 0)
        throw TensorFileError("'" + origin + "' is not a tensor file (bad magic)");
    std::uint64_t n = 0;
    for (int i = 0; i < 8; ++i) n |= std::uint64_t(bytes[8 + i]) << (8 * i);
    if (n > bytes.size() - 16) throw TensorFileError("'" + origin + "': header length exceeds file size");

    nlohmann::json header;
    try {
        header = nlohmann::json::parse(bytes.begin() + 16, bytes.begin() + 16 + std::ptrdiff_t(n));
    } catch (const nlohmann::json::exception& e) {
        throw TensorFileError("'" + origin + "': malformed header: " + e.what());
    }
    const std::size_t payload = 16 + n;

    TensorFile file;
    file.meta = header.value("meta", nlohmann::json::object());
    for (const auto& entry : header.at("tensors")) {
        NamedTensor t;
        t.name = entry.at("name").get<std::string>();
        t.shape = entry.at("shape").get<std::vector<std::int64_t>>();
        const auto offset = entry.at("offset").get<std::uint64_t>();
        const auto count = std::uint64_t(t.numel());
        if (payload + offset + count * 4 > bytes.size())
            throw TensorFileError("'" + origin + "': tensor '" + t.name + "' runs past end of file");
        t.values.resize(count);
        const unsigned char* p = bytes.data() + payload + offset;
        for (std::uint64_t i = 0; i < count; ++i) {
            std::uint32_t bits = 0;
            for (int b = 0; b < 4; ++b) bits |= std::uint32_t(p[4 * i + b]) << (8 * b);
            t.values[i] = std::bit_cast<float>(bits);
        }
        file.tensors.push_back(std::move(t));
    }
    return file;
}

inline void write_tensor_file(const TensorFile& file, const std::filesystem::path& path) {
    const auto bytes = encode_tensor_file(file);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw TensorFileError("cannot write '" + path.string() + "'");
    out.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
    if (!out) throw TensorFileError("write failed for '" + path.string() + "'");
}

inline TensorFile read_tensor_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw TensorFileError("cannot open '" + path.string() + "'");
    std::vector<unsigned char> bytes{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
    return decode_tensor_file(bytes, path.string());
}

}  // namespace mcan

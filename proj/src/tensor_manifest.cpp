#include "obd/tensor_manifest.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>
#include <stdexcept>

#include "json.hpp"

namespace obd {

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

bool valid_name(const std::string& name) {
    if (name.empty() || name.size() > 128) return false;
    for (char c : name) {
        const bool ok = (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') ||
                        (c >= '0' && c <= '9') || c == '.' || c == '_' || c == '-';
        if (!ok) return false;
    }
    return true;
}

std::size_t dtype_size(const std::string& dtype) {
    if (dtype == "f32") return 4;
    if (dtype == "f64") return 8;
    throw std::invalid_argument("unknown dtype \"" + dtype + "\" (expected f32 or f64)");
}

void append_le(std::string& out, std::uint64_t bits, std::size_t bytes) {
    for (std::size_t b = 0; b < bytes; ++b) {
        out.push_back(static_cast<char>((bits >> (8 * b)) & 0xff));
    }
}

std::uint64_t read_le(const std::string& in, std::size_t offset, std::size_t bytes) {
    std::uint64_t bits = 0;
    for (std::size_t b = 0; b < bytes; ++b) {
        bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[offset + b])) << (8 * b);
    }
    return bits;
}

}  // namespace

void write_tensors(const std::string& directory, const std::vector<NamedTensor>& tensors) {
    std::set<std::string> seen;
    for (const NamedTensor& t : tensors) {
        if (!valid_name(t.name)) {
            throw std::invalid_argument("tensor name \"" + t.name +
                                        "\" is not a simple identifier");
        }
        if (!seen.insert(t.name).second) {
            throw std::invalid_argument("duplicate tensor name \"" + t.name + "\"");
        }
        dtype_size(t.dtype);
    }

    fs::create_directories(directory);
    json manifest;
    manifest["tensors"] = json::array();
    for (const NamedTensor& t : tensors) {
        const std::string file = t.name + ".bin";
        manifest["tensors"].push_back({{"name", t.name},
                                       {"shape", {t.value.rows(), t.value.cols()}},
                                       {"dtype", t.dtype},
                                       {"file", file},
                                       {"byte_order", "little-endian"}});

        std::string blob;
        blob.reserve(t.value.rows() * t.value.cols() * dtype_size(t.dtype));
        for (std::size_t i = 0; i < t.value.rows(); ++i) {
            for (std::size_t j = 0; j < t.value.cols(); ++j) {
                if (t.dtype == "f32") {
                    append_le(blob, std::bit_cast<std::uint32_t>(static_cast<float>(t.value(i, j))),
                              4);
                } else {
                    append_le(blob, std::bit_cast<std::uint64_t>(t.value(i, j)), 8);
                }
            }
        }
        std::ofstream stream(fs::path(directory) / file, std::ios::binary | std::ios::trunc);
        if (!stream) {
            throw std::runtime_error("cannot open " + (fs::path(directory) / file).string() +
                                     " for writing");
        }
        stream.write(blob.data(), static_cast<std::streamsize>(blob.size()));
        if (!stream) {
            throw std::runtime_error("short write to " + (fs::path(directory) / file).string());
        }
    }

    std::ofstream stream(fs::path(directory) / "manifest.json", std::ios::trunc);
    if (!stream) {
        throw std::runtime_error("cannot open " + (fs::path(directory) / "manifest.json").string() +
                                 " for writing");
    }
    stream << manifest.dump(2) << "\n";
}

std::vector<NamedTensor> read_tensors(const std::string& directory) {
    const fs::path manifest_path = fs::path(directory) / "manifest.json";
    std::ifstream manifest_stream(manifest_path);
    if (!manifest_stream) {
        throw std::runtime_error("cannot open " + manifest_path.string());
    }
    json manifest;
    try {
        manifest_stream >> manifest;
    } catch (const json::exception& e) {
        throw std::runtime_error("malformed " + manifest_path.string() + ": " + e.what());
    }
    if (!manifest.contains("tensors") || !manifest["tensors"].is_array()) {
        throw std::runtime_error(manifest_path.string() + " has no \"tensors\" array");
    }

    std::vector<NamedTensor> tensors;
    std::set<std::string> seen;
    for (const json& entry : manifest["tensors"]) {
        NamedTensor t;
        try {
            t.name = entry.at("name").get<std::string>();
            t.dtype = entry.at("dtype").get<std::string>();
            const auto shape = entry.at("shape").get<std::vector<std::size_t>>();
            if (shape.size() != 2) {
                throw std::runtime_error("tensor \"" + t.name + "\" has non-2D shape");
            }
            if (entry.at("byte_order").get<std::string>() != "little-endian") {
                throw std::runtime_error("tensor \"" + t.name + "\" has unsupported byte order");
            }
            const std::string file = entry.at("file").get<std::string>();
            if (!valid_name(t.name) || !seen.insert(t.name).second) {
                throw std::runtime_error("tensor name \"" + t.name + "\" invalid or repeated");
            }

            const std::size_t rows = shape[0], cols = shape[1];
            if (rows == 0 || cols == 0) {
                throw std::runtime_error("tensor \"" + t.name + "\" has an empty dimension");
            }
            const std::size_t expected = rows * cols * dtype_size(t.dtype);
            std::ifstream blob_stream(fs::path(directory) / file, std::ios::binary);
            if (!blob_stream) {
                throw std::runtime_error("cannot open blob for tensor \"" + t.name + "\"");
            }
            std::string blob((std::istreambuf_iterator<char>(blob_stream)),
                             std::istreambuf_iterator<char>());
            if (blob.size() != expected) {
                throw std::runtime_error("tensor \"" + t.name + "\" declares " +
                                         std::to_string(expected) + " bytes but blob has " +
                                         std::to_string(blob.size()));
            }

            t.value = Matrix(rows, cols);
            std::size_t offset = 0;
            for (std::size_t i = 0; i < rows; ++i) {
                for (std::size_t j = 0; j < cols; ++j) {
                    if (t.dtype == "f32") {
                        t.value(i, j) = static_cast<double>(std::bit_cast<float>(
                            static_cast<std::uint32_t>(read_le(blob, offset, 4))));
                        offset += 4;
                    } else {
                        t.value(i, j) = std::bit_cast<double>(read_le(blob, offset, 8));
                        offset += 8;
                    }
                }
            }
        } catch (const json::exception& e) {
            throw std::runtime_error("malformed manifest entry in " + manifest_path.string() +
                                     ": " + e.what());
        }
        tensors.push_back(std::move(t));
    }
    return tensors;
}

}  // namespace obd

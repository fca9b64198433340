#pragma once

#include <cstring>
#include <map>
#include <string>
#include <vector>

#include "ldit/io.hpp"
#include "ldit/layers.hpp"
#include "ldit/tensor.hpp"

namespace ldit {

// Model checkpoint container.
//
//   magic "CCLT" | u32 version | u64 header bytes | header text | payload
//
// The header is "key: value" text: a stage tag, free-form metadata fields, a
// tensor directory (name, shape, byte range), the payload length, and a CRC of
// the payload. Tensors are raw row-major float32, little-endian, concatenated
// in directory order. Loading verifies magic, version, directory consistency,
// total size, and the checksum, so silent corruption is rejected.
namespace ckpt {

constexpr char MAGIC[5] = "CCLT";
constexpr std::uint32_t VERSION = 1;

struct TensorEntry {
    std::string name;
    Shape shape;
    std::uint64_t offset = 0;
    std::uint64_t nbytes = 0;
};

struct File {
    std::string stage;
    std::map<std::string, std::string> fields;
    std::vector<TensorEntry> dir;
    std::string payload;

    const TensorEntry* find(const std::string& name) const {
        for (const auto& e : dir) {
            if (e.name == name) return &e;
        }
        return nullptr;
    }

    Tensor<float> tensor(const std::string& name) const {
        const TensorEntry* e = find(name);
        if (!e) throw format_error("checkpoint: missing tensor '" + name + "'");
        Tensor<float> t(e->shape);
        std::memcpy(t.data.data(), payload.data() + e->offset, e->nbytes);
        return t;
    }
};

inline std::string field(const File& f, const std::string& key) {
    auto it = f.fields.find(key);
    if (it == f.fields.end()) throw format_error("checkpoint: missing field '" + key + "'");
    return it->second;
}

// CRC over the raw bytes of a parameter group, used to tie a conditioning
// checkpoint to the exact frozen denoiser it was trained against.
inline std::string param_group_crc(const ParamList<float>& params) {
    std::uint32_t crc = 0;
    for (const auto& p : params) {
        crc = io::crc32_update(p.tensor->data.data(),
                               static_cast<std::size_t>(p.tensor->size()) * sizeof(float), crc);
    }
    return io::hex32(crc);
}

inline void save(const std::string& path, const std::string& stage,
                 const std::map<std::string, std::string>& fields,
                 const ParamList<float>& params) {
    std::string payload;
    std::string dir_text;
    std::uint64_t offset = 0;
    for (const auto& p : params) {
        std::uint64_t nbytes = static_cast<std::uint64_t>(p.tensor->size()) * sizeof(float);
        const Shape& s = p.tensor->shape;
        dir_text += "tensor: " + p.name + " " + std::to_string(s.c) + " " + std::to_string(s.d) +
                    " " + std::to_string(s.h) + " " + std::to_string(s.w) + " " +
                    std::to_string(offset) + " " + std::to_string(nbytes) + "\n";
        payload.append(reinterpret_cast<const char*>(p.tensor->data.data()),
                       static_cast<std::size_t>(nbytes));
        offset += nbytes;
    }

    std::string header;
    io::put_line(header, "stage", stage);
    for (const auto& [k, v] : fields) io::put_line(header, k, v);
    header += dir_text;
    io::put_line(header, "payload_bytes", std::to_string(payload.size()));
    io::put_line(header, "payload_crc32", io::hex32(io::crc32(payload)));

    std::string out;
    out.append(MAGIC, 4);
    io::put_u32(out, VERSION);
    io::put_u64(out, header.size());
    out += header;
    out += payload;
    io::write_file(path, out);
}

inline File load(const std::string& path) {
    const std::string buf = io::read_file(path);
    io::Cursor cur{buf};
    if (cur.bytes(4, "magic") != std::string(MAGIC, 4)) {
        throw format_error("not a model checkpoint (bad magic): " + path);
    }
    std::uint32_t ver = cur.u32("version");
    if (ver != VERSION) {
        throw format_error("unsupported checkpoint version " + std::to_string(ver) + ": " + path);
    }
    std::uint64_t hsize = cur.u64("header size");
    std::string header = cur.bytes(static_cast<std::size_t>(hsize), "header");

    File f;
    std::uint64_t expect_payload = 0;
    bool have_payload = false, have_crc = false;
    std::uint32_t expect_crc = 0;
    std::uint64_t running = 0;
    for (const auto& [key, value] : io::parse_lines(header)) {
        if (key == "stage") {
            f.stage = value;
        } else if (key == "tensor") {
            std::istringstream is(value);
            TensorEntry e;
            long long c, d, h, w, off, nb;
            if (!(is >> e.name >> c >> d >> h >> w >> off >> nb)) {
                throw format_error("checkpoint: malformed tensor entry: " + value);
            }
            e.shape = {static_cast<int>(c), static_cast<int>(d), static_cast<int>(h),
                       static_cast<int>(w)};
            e.offset = static_cast<std::uint64_t>(off);
            e.nbytes = static_cast<std::uint64_t>(nb);
            if (e.shape.size() * sizeof(float) != e.nbytes || e.offset != running) {
                throw format_error("checkpoint: inconsistent tensor directory at '" + e.name + "'");
            }
            running += e.nbytes;
            f.dir.push_back(std::move(e));
        } else if (key == "payload_bytes") {
            expect_payload = static_cast<std::uint64_t>(io::parse_int(value, "payload_bytes"));
            have_payload = true;
        } else if (key == "payload_crc32") {
            expect_crc = static_cast<std::uint32_t>(std::stoul(value, nullptr, 16));
            have_crc = true;
        } else {
            f.fields[key] = value;
        }
    }
    if (f.stage.empty()) throw format_error("checkpoint: missing stage tag: " + path);
    if (!have_payload || !have_crc) {
        throw format_error("checkpoint: missing payload length or checksum: " + path);
    }
    if (running != expect_payload) {
        throw format_error("checkpoint: directory does not tile the payload: " + path);
    }
    f.payload = cur.bytes(static_cast<std::size_t>(expect_payload), "payload");
    if (cur.pos != buf.size()) {
        throw format_error("checkpoint: trailing bytes after payload: " + path);
    }
    if (io::crc32(f.payload) != expect_crc) {
        throw format_error("checkpoint: payload checksum mismatch (corrupted file): " + path);
    }
    return f;
}

// Guard that a loaded file belongs to the pipeline stage the caller expects.
inline void expect_stage(const File& f, const std::string& stage, const std::string& path) {
    if (f.stage != stage) {
        throw format_error("checkpoint stage mismatch: expected '" + stage + "', file is '" +
                           f.stage + "': " + path);
    }
}

// Copy values into an existing parameter list; names and shapes must match
// the directory exactly (same count, same order).
inline void restore(const File& f, const ParamList<float>& params) {
    if (f.dir.size() != params.size()) {
        throw format_error("checkpoint: expected " + std::to_string(params.size()) +
                           " tensors, file has " + std::to_string(f.dir.size()));
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
        const TensorEntry& e = f.dir[i];
        if (e.name != params[i].name) {
            throw format_error("checkpoint: tensor name mismatch: expected '" + params[i].name +
                               "', file has '" + e.name + "'");
        }
        if (e.shape != params[i].tensor->shape) {
            throw format_error("checkpoint: shape mismatch for '" + e.name + "': expected " +
                               params[i].tensor->shape.str() + ", file has " + e.shape.str());
        }
        std::memcpy(params[i].tensor->data.data(), f.payload.data() + e.offset,
                    static_cast<std::size_t>(e.nbytes));
    }
}

} // namespace ckpt
} // namespace ldit

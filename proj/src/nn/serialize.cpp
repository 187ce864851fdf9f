#include "kstone/nn/serialize.hpp"

#include "kstone/error.hpp"

#include <cstring>
#include <fstream>

namespace kstone::nn {

std::vector<float> flatten_state(Module& m) {
    std::vector<ParamRef> params;
    std::vector<BufferRef> bufs;
    m.collect("", params, bufs);
    std::vector<float> out;
    for (auto& [n, p] : params) out.insert(out.end(), p->value.data.begin(), p->value.data.end());
    for (auto& [n, b] : bufs) out.insert(out.end(), b->data.begin(), b->data.end());
    return out;
}

std::size_t state_size(Module& m) {
    std::vector<ParamRef> params;
    std::vector<BufferRef> bufs;
    m.collect("", params, bufs);
    std::size_t n = 0;
    for (auto& [name, p] : params) n += p->value.numel();
    for (auto& [name, b] : bufs) n += b->numel();
    return n;
}

void restore_state(Module& m, const std::vector<float>& blob) {
    std::vector<ParamRef> params;
    std::vector<BufferRef> bufs;
    m.collect("", params, bufs);
    if (blob.size() != state_size(m)) throw ConfigError("parameter blob size does not match architecture");
    std::size_t off = 0;
    for (auto& [n, p] : params) {
        std::copy_n(blob.begin() + off, p->value.numel(), p->value.data.begin());
        off += p->value.numel();
    }
    for (auto& [n, b] : bufs) {
        std::copy_n(blob.begin() + off, b->numel(), b->data.begin());
        off += b->numel();
    }
}

namespace {

template <class T>
void put(std::ofstream& out, T v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <class T>
T get(std::ifstream& in, const std::filesystem::path& path) {
    T v{};
    in.read(reinterpret_cast<char*>(&v), sizeof v);
    if (!in) throw IoError("truncated file: " + path.string());
    return v;
}

} // namespace

void write_blob_file(const BlobFile& f, const std::filesystem::path& path) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    const auto tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot write " + path.string());
        char magic[8] = {};
        std::memcpy(magic, f.magic.data(), std::min<std::size_t>(8, f.magic.size()));
        out.write(magic, 8);
        put<std::uint32_t>(out, f.version);
        put<std::uint64_t>(out, f.header.size());
        out.write(f.header.data(), static_cast<std::streamsize>(f.header.size()));
        put<std::uint32_t>(out, static_cast<std::uint32_t>(f.blobs.size()));
        for (const auto& b : f.blobs) {
            put<std::uint64_t>(out, b.size());
            out.write(reinterpret_cast<const char*>(b.data()), static_cast<std::streamsize>(b.size() * sizeof(float)));
        }
        if (!out) throw IoError("write failed: " + path.string());
    }
    std::filesystem::rename(tmp, path);
}

BlobFile read_blob_file(const std::filesystem::path& path, const std::string& expected_magic) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    BlobFile f;
    char magic[8] = {};
    in.read(magic, 8);
    f.magic.assign(magic, strnlen(magic, 8));
    if (!in || f.magic != expected_magic)
        throw IoError(path.string() + ": not a '" + expected_magic + "' file");
    f.version = get<std::uint32_t>(in, path);
    const auto hlen = get<std::uint64_t>(in, path);
    f.header.resize(hlen);
    in.read(f.header.data(), static_cast<std::streamsize>(hlen));
    const auto count = get<std::uint32_t>(in, path);
    for (std::uint32_t i = 0; i < count; ++i) {
        const auto n = get<std::uint64_t>(in, path);
        std::vector<float> b(n);
        in.read(reinterpret_cast<char*>(b.data()), static_cast<std::streamsize>(n * sizeof(float)));
        if (!in) throw IoError("truncated blob in " + path.string());
        f.blobs.push_back(std::move(b));
    }
    return f;
}

} // namespace kstone::nn

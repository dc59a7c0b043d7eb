#include "afp/serialize.hpp"

#include "afp/errors.hpp"

#include <openssl/evp.h>

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <memory>
#include <sstream>

namespace afp {

namespace {

class Writer {
public:
    void u8(std::uint8_t v) { out_.push_back(static_cast<char>(v)); }
    void u32(std::uint32_t v) {
        for (int i = 0; i < 4; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
    }
    void u64(std::uint64_t v) {
        for (int i = 0; i < 8; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
    }
    void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
    void raw(std::string_view s) { out_.append(s); }
    void floats(const std::vector<float>& v) {
        for (float f : v) f32(f);
    }
    const std::string& bytes() const { return out_; }

private:
    std::string out_;
};

class Reader {
public:
    Reader(const std::string& bytes, std::string what) : bytes_(bytes), what_(std::move(what)) {}

    std::uint8_t u8() {
        need(1);
        return static_cast<std::uint8_t>(bytes_[pos_++]);
    }
    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<std::uint8_t>(bytes_[pos_++])) << (8 * i);
        return v;
    }
    std::uint64_t u64() {
        need(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<std::uint8_t>(bytes_[pos_++])) << (8 * i);
        return v;
    }
    std::string raw(std::size_t n) {
        need(n);
        std::string s = bytes_.substr(pos_, n);
        pos_ += n;
        return s;
    }
    std::vector<float> floats(std::size_t n) {
        if (n > (bytes_.size() - pos_) / 4) fail("truncated float payload");
        std::vector<float> v(n);
        for (auto& f : v) f = std::bit_cast<float>(u32());
        return v;
    }
    void expect_end() const {
        if (pos_ != bytes_.size()) fail("trailing bytes");
    }
    [[noreturn]] void fail(const std::string& msg) const { throw FormatError(what_ + ": " + msg); }

private:
    void need(std::size_t n) const {
        if (bytes_.size() - pos_ < n) fail("unexpected end of file");
    }

    const std::string& bytes_;
    std::string what_;
    std::size_t pos_ = 0;
};

}  // namespace

std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_file(const std::filesystem::path& path, const std::string& bytes) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("cannot write " + path.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw FormatError("short write to " + path.string());
}

void save_checkpoint(const ModelCheckpoint& model, const std::filesystem::path& path) {
    model.validate();
    Writer w;
    w.raw("AFCK");
    w.u32(kCheckpointVersion);
    const auto desc = model.spec.descriptor();
    w.u64(desc.size());
    w.raw(desc);
    w.u64(model.params.size());
    w.floats(model.params);
    w.floats(model.adam.m);
    w.floats(model.adam.v);
    w.u64(model.adam.t);
    w.u64(model.seed);
    write_file(path, w.bytes());
}

ModelCheckpoint load_checkpoint(const std::filesystem::path& path) {
    const auto bytes = read_file(path);
    Reader r(bytes, path.string());
    if (r.raw(4) != "AFCK") r.fail("bad checkpoint magic");
    if (const auto v = r.u32(); v != kCheckpointVersion) r.fail("unsupported checkpoint version " + std::to_string(v));
    ModelCheckpoint m;
    const auto len = r.u64();
    if (len > bytes.size()) r.fail("descriptor length exceeds file size");
    m.spec = NetworkSpec::parse(r.raw(static_cast<std::size_t>(len)));
    const auto n = r.u64();
    if (n != m.spec.param_count()) r.fail("param count does not match network descriptor");
    m.params = r.floats(n);
    m.adam.m = r.floats(n);
    m.adam.v = r.floats(n);
    m.adam.t = r.u64();
    m.seed = r.u64();
    r.expect_end();
    return m;
}

std::string encode_blob(const Tensor& t) {
    Writer w;
    w.raw("AFPT");
    w.u32(kBlobVersion);
    w.u8(0);
    w.u8(static_cast<std::uint8_t>(t.rank()));
    for (int d : t.shape()) w.u32(static_cast<std::uint32_t>(d));
    w.floats(t.values());
    return w.bytes();
}

Tensor decode_blob(const std::string& bytes, const std::string& what) {
    Reader r(bytes, what);
    if (r.raw(4) != "AFPT") r.fail("bad tensor blob magic");
    if (const auto v = r.u32(); v != kBlobVersion) r.fail("unsupported blob version " + std::to_string(v));
    if (r.u8() != 0) r.fail("unsupported dtype");
    const int rank = r.u8();
    if (rank > 4) r.fail("rank > 4");
    std::vector<int> shape;
    std::size_t n = 1;
    for (int i = 0; i < rank; ++i) {
        const auto d = r.u32();
        if (d > (1u << 30)) r.fail("dimension too large");
        shape.push_back(static_cast<int>(d));
        n *= d;
    }
    auto data = r.floats(n);
    r.expect_end();
    return Tensor(std::move(shape), std::move(data));
}

void save_blob(const Tensor& t, const std::filesystem::path& path) { write_file(path, encode_blob(t)); }

Tensor load_blob(const std::filesystem::path& path) { return decode_blob(read_file(path), path.string()); }

std::string sha256_bytes(const std::string& bytes) {
    std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), &EVP_MD_CTX_free);
    std::array<unsigned char, EVP_MAX_MD_SIZE> md{};
    unsigned int len = 0;
    if (!ctx || EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr) != 1 ||
        EVP_DigestUpdate(ctx.get(), bytes.data(), bytes.size()) != 1 ||
        EVP_DigestFinal_ex(ctx.get(), md.data(), &len) != 1) {
        throw std::runtime_error("sha256 failed");
    }
    static constexpr char hex[] = "0123456789abcdef";
    std::string out;
    for (unsigned int i = 0; i < len; ++i) {
        out.push_back(hex[md[i] >> 4]);
        out.push_back(hex[md[i] & 15]);
    }
    return out;
}

std::string sha256_file(const std::filesystem::path& path) { return sha256_bytes(read_file(path)); }

}  // namespace afp

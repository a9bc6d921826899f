#include "hflow/numerics/archive.hpp"

#include "hflow/numerics/error.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

namespace hflow::num {

namespace {

constexpr char kMagic[4] = {'H', 'F', 'L', 'W'};

template <typename T>
void put_le(std::vector<std::uint8_t>& out, T value) {
    for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<std::uint8_t>(value >> (8 * i)));
}

class Reader {
public:
    explicit Reader(const std::vector<std::uint8_t>& bytes) : bytes_(bytes) {}

    template <typename T>
    T get() {
        need(sizeof(T));
        T value = 0;
        for (std::size_t i = 0; i < sizeof(T); ++i) value |= static_cast<T>(static_cast<T>(bytes_[pos_ + i]) << (8 * i));
        pos_ += sizeof(T);
        return value;
    }

    std::string get_string(std::size_t len) {
        need(len);
        std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), len);
        pos_ += len;
        return s;
    }

    bool done() const { return pos_ == bytes_.size(); }

private:
    void need(std::size_t n) const {
        if (pos_ + n > bytes_.size()) throw ContractError("archive truncated at byte " + std::to_string(pos_));
    }

    const std::vector<std::uint8_t>& bytes_;
    std::size_t pos_ = 0;
};

} // namespace

std::vector<std::uint8_t> encode_archive(const TensorArchive& archive) {
    std::vector<std::uint8_t> out(std::begin(kMagic), std::end(kMagic));
    put_le<std::uint16_t>(out, kArchiveVersion);
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(archive.size()));
    for (const auto& [name, tensor] : archive) {
        if (name.size() > 0xffff) throw ContractError("archive: tensor name too long: " + name.substr(0, 32));
        put_le<std::uint16_t>(out, static_cast<std::uint16_t>(name.size()));
        out.insert(out.end(), name.begin(), name.end());
        out.push_back(static_cast<std::uint8_t>(tensor.rank()));
        for (std::size_t d : tensor.shape()) put_le<std::uint32_t>(out, static_cast<std::uint32_t>(d));
        for (double v : tensor.values()) put_le<std::uint64_t>(out, std::bit_cast<std::uint64_t>(v));
    }
    return out;
}

TensorArchive decode_archive(const std::vector<std::uint8_t>& bytes) {
    if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0)
        throw ContractError("archive: missing HFLW magic");
    std::vector<std::uint8_t> rest(bytes.begin() + 4, bytes.end());
    Reader in(rest);
    const auto version = in.get<std::uint16_t>();
    if (version != kArchiveVersion) throw ContractError("archive: unsupported version " + std::to_string(version));
    const auto count = in.get<std::uint32_t>();
    TensorArchive archive;
    archive.reserve(count);
    for (std::uint32_t k = 0; k < count; ++k) {
        const auto name_len = in.get<std::uint16_t>();
        std::string name = in.get_string(name_len);
        const auto rank = in.get<std::uint8_t>();
        if (rank > 4) throw ContractError("archive: tensor '" + name + "' has rank " + std::to_string(rank));
        Shape shape(rank);
        for (auto& d : shape) d = in.get<std::uint32_t>();
        std::vector<double> data(shape_size(shape));
        for (auto& v : data) v = std::bit_cast<double>(in.get<std::uint64_t>());
        archive.emplace_back(std::move(name), Tensor(std::move(shape), std::move(data)));
    }
    if (!in.done()) throw ContractError("archive: trailing bytes after " + std::to_string(count) + " tensors");
    return archive;
}

void write_file_atomic(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw std::runtime_error("cannot open " + tmp.string() + " for writing");
        out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw std::runtime_error("failed writing " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

void write_text_atomic(const std::filesystem::path& path, const std::string& text) {
    write_file_atomic(path, std::vector<std::uint8_t>(text.begin(), text.end()));
}

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_archive(const std::filesystem::path& path, const TensorArchive& archive) {
    write_file_atomic(path, encode_archive(archive));
}

TensorArchive read_archive(const std::filesystem::path& path) {
    if (!std::filesystem::exists(path)) throw std::runtime_error("checkpoint not found: " + path.string());
    return decode_archive(read_file_bytes(path));
}

const Tensor& find_tensor(const TensorArchive& archive, const std::string& name) {
    for (const auto& [n, t] : archive)
        if (n == name) return t;
    throw ContractError("archive: missing tensor '" + name + "'");
}

bool has_tensor(const TensorArchive& archive, const std::string& name) {
    for (const auto& entry : archive)
        if (entry.first == name) return true;
    return false;
}

void append_params(TensorArchive& archive, const ParamRefs& params) {
    for (const auto* p : params) archive.emplace_back(p->name, p->value);
}

void load_params(const TensorArchive& archive, const ParamRefs& params) {
    for (auto* p : params) {
        const Tensor& t = find_tensor(archive, p->name);
        if (t.shape() != p->value.shape())
            throw ContractError("archive: tensor '" + p->name + "' has shape " + shape_string(t.shape()) +
                                ", model expects " + shape_string(p->value.shape()));
        p->value = t;
        p->grad = Tensor::zeros_like(t);
    }
}

void put_scalar(TensorArchive& archive, const std::string& name, double value) {
    archive.emplace_back(name, Tensor({1}, value));
}

double get_scalar(const TensorArchive& archive, const std::string& name) {
    const Tensor& t = find_tensor(archive, name);
    if (t.size() != 1) throw ContractError("archive: '" + name + "' is not a scalar");
    return t[0];
}

} // namespace hflow::num

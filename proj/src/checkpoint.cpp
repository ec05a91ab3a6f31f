#include "ddpe/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "ddpe/errors.hpp"

namespace ddpe {
namespace {

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) {
        out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    }
}

void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) {
        out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    }
}

class Reader {
public:
    explicit Reader(const std::vector<std::uint8_t>& bytes) : bytes_(bytes) {}

    bool done() const { return pos_ == bytes_.size(); }

    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) {
            v |= static_cast<std::uint32_t>(bytes_[pos_++]) << (8 * i);
        }
        return v;
    }

    std::uint64_t u64() {
        need(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) {
            v |= static_cast<std::uint64_t>(bytes_[pos_++]) << (8 * i);
        }
        return v;
    }

    std::string text(std::uint64_t n) {
        need(n);
        std::string s(bytes_.begin() + static_cast<std::ptrdiff_t>(pos_),
                      bytes_.begin() + static_cast<std::ptrdiff_t>(pos_ + n));
        pos_ += n;
        return s;
    }

private:
    void need(std::uint64_t n) const {
        if (n > bytes_.size() - pos_) {
            throw ParseError("checkpoint: truncated at byte " + std::to_string(pos_));
        }
    }

    const std::vector<std::uint8_t>& bytes_;
    std::size_t pos_ = 0;
};

} // namespace

template <typename T>
std::vector<std::uint8_t> serialize_checkpoint(const Model<T>& model) {
    std::vector<std::uint8_t> out{'D', 'D', 'P', 'E'};
    put_u32(out, kCheckpointVersion);
    const std::string cfg = model.config().to_text();
    put_u64(out, cfg.size());
    out.insert(out.end(), cfg.begin(), cfg.end());
    for (const auto& p : model.parameters()) {
        put_u32(out, static_cast<std::uint32_t>(p.name.size()));
        out.insert(out.end(), p.name.begin(), p.name.end());
        put_u32(out, static_cast<std::uint32_t>(p.tensor.rank()));
        for (const auto e : p.tensor.shape()) {
            put_u64(out, e);
        }
        for (const T v : p.tensor.data()) {
            put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
        }
    }
    return out;
}

template <typename T>
Model<T> deserialize_checkpoint(const std::vector<std::uint8_t>& bytes) {
    Reader in(bytes);
    if (in.text(4) != "DDPE") {
        throw ParseError("checkpoint: bad magic");
    }
    const std::uint32_t version = in.u32();
    if (version != kCheckpointVersion) {
        throw ParseError("checkpoint: unsupported version " + std::to_string(version));
    }
    const std::uint64_t cfg_len = in.u64();
    const NetworkConfig cfg = NetworkConfig::from_text(in.text(cfg_len));
    Model<T> model = build_network<T>(cfg, 0);
    for (auto& p : model.parameters()) {
        const std::string name = in.text(in.u32());
        if (name != p.name) {
            throw ParseError("checkpoint: expected parameter '" + p.name + "', found '" + name + "'");
        }
        const std::uint32_t rank = in.u32();
        Shape shape(rank);
        for (auto& e : shape) {
            e = in.u64();
        }
        if (shape != p.tensor.shape()) {
            throw ParseError("checkpoint: parameter '" + name + "' has shape " + shape_str(shape) + ", config implies " +
                             shape_str(p.tensor.shape()));
        }
        auto values = p.tensor.data();
        for (auto& v : values) {
            v = static_cast<T>(std::bit_cast<float>(in.u32()));
        }
    }
    if (!in.done()) {
        throw ParseError("checkpoint: trailing bytes after last parameter");
    }
    return model;
}

template <typename T>
void save_checkpoint(const Model<T>& model, const std::filesystem::path& path) {
    const auto bytes = serialize_checkpoint(model);
    std::ofstream f(path, std::ios::binary);
    if (!f) {
        throw ConfigError("checkpoint: cannot write " + path.string());
    }
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

template <typename T>
Model<T> load_checkpoint(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) {
        throw ConfigError("checkpoint: cannot read " + path.string());
    }
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    try {
        return deserialize_checkpoint<T>(bytes);
    } catch (const ParseError& e) {
        throw ParseError(path.string() + ": " + e.what());
    }
}

template std::vector<std::uint8_t> serialize_checkpoint(const Model<float>&);
template std::vector<std::uint8_t> serialize_checkpoint(const Model<double>&);
template Model<float> deserialize_checkpoint<float>(const std::vector<std::uint8_t>&);
template Model<double> deserialize_checkpoint<double>(const std::vector<std::uint8_t>&);
template void save_checkpoint(const Model<float>&, const std::filesystem::path&);
template void save_checkpoint(const Model<double>&, const std::filesystem::path&);
template Model<float> load_checkpoint<float>(const std::filesystem::path&);
template Model<double> load_checkpoint<double>(const std::filesystem::path&);

} // namespace ddpe

#include "spf/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include "spf/digest.hpp"
#include "spf/errors.hpp"

namespace spf {
namespace {

constexpr char kMagic[8] = {'S', 'P', 'F', 'C', 'K', 'P', 'T', '1'};

std::int64_t numel(const std::vector<std::int64_t>& shape) {
    std::int64_t n = 1;
    for (auto d : shape) n *= d;
    return n;
}

}  // namespace

const NamedArray* Checkpoint::find(const std::string& name) const {
    for (const auto& a : arrays)
        if (a.name == name) return &a;
    return nullptr;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
    nlohmann::json header;
    header["metadata"] = ckpt.metadata;
    auto& index = header["arrays"] = nlohmann::json::array();
    std::int64_t offset = 0;
    for (const auto& a : ckpt.arrays) {
        if (numel(a.shape) != static_cast<std::int64_t>(a.data.size())) {
            throw ArgumentError("checkpoint array '" + a.name + "' has inconsistent shape");
        }
        index.push_back({{"name", a.name}, {"group", a.group}, {"shape", a.shape}, {"offset", offset}});
        offset += static_cast<std::int64_t>(a.data.size());
    }
    const std::string text = header.dump();
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    const auto tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary);
        if (!out) throw std::runtime_error("cannot write " + tmp);
        out.write(kMagic, sizeof kMagic);
        const std::uint64_t len = text.size();
        out.write(reinterpret_cast<const char*>(&len), sizeof len);
        out.write(text.data(), static_cast<std::streamsize>(text.size()));
        for (const auto& a : ckpt.arrays) {
            out.write(reinterpret_cast<const char*>(a.data.data()),
                      static_cast<std::streamsize>(a.data.size() * sizeof(float)));
        }
        if (!out) throw std::runtime_error("short write to " + tmp);
    }
    std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ArgumentError("cannot open checkpoint " + path.string());
    char magic[8];
    in.read(magic, sizeof magic);
    if (!in || std::memcmp(magic, kMagic, sizeof kMagic) != 0) {
        throw ArgumentError("not a checkpoint file: " + path.string());
    }
    std::uint64_t len = 0;
    in.read(reinterpret_cast<char*>(&len), sizeof len);
    std::string text(len, '\0');
    in.read(text.data(), static_cast<std::streamsize>(len));
    const auto header = nlohmann::json::parse(text);
    Checkpoint ckpt;
    ckpt.metadata = header.at("metadata");
    for (const auto& e : header.at("arrays")) {
        NamedArray a;
        a.name = e.at("name").get<std::string>();
        a.group = e.at("group").get<std::string>();
        a.shape = e.at("shape").get<std::vector<std::int64_t>>();
        a.data.resize(static_cast<std::size_t>(numel(a.shape)));
        in.read(reinterpret_cast<char*>(a.data.data()), static_cast<std::streamsize>(a.data.size() * sizeof(float)));
        if (!in) throw ArgumentError("truncated checkpoint " + path.string());
        ckpt.arrays.push_back(std::move(a));
    }
    return ckpt;
}

NamedArray to_named_array(const std::string& name, const std::string& group, const torch::Tensor& t) {
    auto c = t.detach().to(torch::kFloat32).contiguous().cpu();
    NamedArray a;
    a.name = name;
    a.group = group;
    a.shape.assign(c.sizes().begin(), c.sizes().end());
    a.data.assign(c.data_ptr<float>(), c.data_ptr<float>() + c.numel());
    return a;
}

torch::Tensor to_tensor(const NamedArray& a) {
    auto t = torch::empty(a.shape, torch::kFloat32);
    std::memcpy(t.data_ptr<float>(), a.data.data(), a.data.size() * sizeof(float));
    return t;
}

void append_module(Checkpoint& ckpt, const torch::nn::Module& module, const std::string& prefix,
                   const std::function<std::string(const std::string&)>& group_of) {
    for (const auto& p : module.named_parameters()) {
        ckpt.arrays.push_back(to_named_array(prefix + p.key(), group_of(p.key()), p.value()));
    }
    for (const auto& b : module.named_buffers()) {
        ckpt.arrays.push_back(to_named_array(prefix + b.key(), "buffer", b.value()));
    }
}

void load_module(torch::nn::Module& module, const Checkpoint& ckpt, const std::string& prefix) {
    torch::NoGradGuard guard;
    auto copy_in = [&](const std::string& key, torch::Tensor& dst) {
        const NamedArray* a = ckpt.find(prefix + key);
        if (!a) throw StateError("checkpoint is missing array '" + prefix + key + "'");
        auto src = to_tensor(*a);
        if (src.sizes() != dst.sizes()) throw StateError("shape mismatch for '" + prefix + key + "'");
        dst.copy_(src.to(dst.dtype()));
    };
    for (auto& p : module.named_parameters()) copy_in(p.key(), p.value());
    for (auto& b : module.named_buffers()) copy_in(b.key(), b.value());
}

std::string parameter_digest(const torch::nn::Module& module) {
    Sha256 h;
    for (const auto& p : module.named_parameters()) {
        auto c = p.value().detach().contiguous().cpu();
        h.update(p.key());
        for (auto d : c.sizes()) h.update(std::to_string(d) + ",");
        h.update(std::span(static_cast<const unsigned char*>(c.data_ptr()), c.numel() * c.element_size()));
    }
    return h.hex();
}

}  // namespace spf

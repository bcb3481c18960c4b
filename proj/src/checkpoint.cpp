#include "icft/checkpoint.hpp"

#include <fstream>

namespace icft {

namespace {
constexpr char kMagic[4] = {'I', 'C', 'K', 'P'};
constexpr uint32_t kVersion = 1;
}  // namespace

void save_checkpoint(const std::string& path, const CheckpointFile& file) {
    nlohmann::json header;
    header["version"] = kVersion;
    header["kind"] = file.kind;
    header["meta"] = file.meta;
    auto& dir = header["tensors"] = nlohmann::json::array();
    for (const auto& t : file.tensors) {
        nlohmann::json e;
        e["name"] = t.name;
        e["dtype"] = t.dtype;
        e["shape"] = t.shape;
        e["bytes"] = t.raw.size();
        dir.push_back(e);
    }
    const std::string hs = header.dump();

    std::ofstream out(path, std::ios::binary);
    if (!out) throw io_error("cannot write checkpoint " + path);
    out.write(kMagic, 4);
    uint32_t ver = kVersion;
    out.write(reinterpret_cast<const char*>(&ver), sizeof(ver));
    uint64_t hlen = hs.size();
    out.write(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
    out.write(hs.data(), static_cast<std::streamsize>(hs.size()));
    for (const auto& t : file.tensors)
        out.write(reinterpret_cast<const char*>(t.raw.data()),
                  static_cast<std::streamsize>(t.raw.size()));
    if (!out) throw io_error("failed writing checkpoint " + path);
}

CheckpointFile load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw io_error("cannot open checkpoint " + path);
    char magic[4];
    in.read(magic, 4);
    if (!in || std::string(magic, 4) != std::string(kMagic, 4))
        throw validation_error("not a checkpoint file: " + path);
    uint32_t ver = 0;
    in.read(reinterpret_cast<char*>(&ver), sizeof(ver));
    if (ver != kVersion) throw validation_error("unsupported checkpoint version");
    uint64_t hlen = 0;
    in.read(reinterpret_cast<char*>(&hlen), sizeof(hlen));
    std::string hs(hlen, '\0');
    in.read(hs.data(), static_cast<std::streamsize>(hlen));
    if (!in) throw io_error("truncated checkpoint header " + path);
    nlohmann::json header = nlohmann::json::parse(hs);

    CheckpointFile file;
    file.kind = header.at("kind").get<std::string>();
    file.meta = header.at("meta");
    for (const auto& e : header.at("tensors")) {
        TensorRecord t;
        t.name = e.at("name").get<std::string>();
        t.dtype = e.at("dtype").get<std::string>();
        t.shape = e.at("shape").get<std::vector<int>>();
        t.raw.resize(e.at("bytes").get<size_t>());
        in.read(reinterpret_cast<char*>(t.raw.data()),
                static_cast<std::streamsize>(t.raw.size()));
        if (!in) throw io_error("truncated checkpoint data " + path);
        file.tensors.push_back(std::move(t));
    }
    return file;
}

}  // namespace icft

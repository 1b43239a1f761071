#include "crowdmlp/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

namespace crowdmlp {

namespace {

constexpr char kMagic[5] = {'C', 'M', 'L', 'P', '1'};

void put_u64(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) {
        out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
    }
}

std::uint64_t get_u64(const unsigned char* p) {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) {
        v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
    }
    return v;
}

void append_doubles(std::string& out, const std::vector<double>& values) {
    for (double d : values) {
        put_u64(out, std::bit_cast<std::uint64_t>(d));
    }
}

nlohmann::json array_table(const std::vector<NamedArray>& arrays, std::uint64_t& offset) {
    nlohmann::json table = nlohmann::json::array();
    for (const auto& a : arrays) {
        table.push_back({{"name", a.name},
                         {"shape", a.shape},
                         {"offset", offset},
                         {"count", a.data.size()}});
        offset += a.data.size() * 8;
    }
    return table;
}

std::vector<NamedArray> read_table(const nlohmann::json& table, const unsigned char* blob,
                                   std::uint64_t blob_size) {
    std::vector<NamedArray> arrays;
    for (const auto& entry : table) {
        NamedArray a;
        a.name = entry.at("name").get<std::string>();
        a.shape = entry.at("shape").get<Shape>();
        const std::uint64_t offset = entry.at("offset").get<std::uint64_t>();
        const std::uint64_t count = entry.at("count").get<std::uint64_t>();
        if (count != static_cast<std::uint64_t>(numel(a.shape))) {
            throw FormatError("checkpoint array " + a.name + " count disagrees with its shape");
        }
        if (offset + count * 8 > blob_size) {
            throw FormatError("checkpoint is truncated: array " + a.name +
                              " extends past the end of the file");
        }
        a.data.resize(count);
        for (std::uint64_t i = 0; i < count; ++i) {
            a.data[i] = std::bit_cast<double>(get_u64(blob + offset + i * 8));
        }
        arrays.push_back(std::move(a));
    }
    return arrays;
}

} // namespace

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
    std::uint64_t offset = 0;
    nlohmann::json header{
        {"version", ckpt.version},
        {"model_config", ckpt.model_config},
        {"epoch", ckpt.epoch},
        {"rng", {{"seed", ckpt.rng_seed}, {"state", ckpt.rng_state}}},
        {"arrays", array_table(ckpt.arrays, offset)},
        {"optimizer_arrays", array_table(ckpt.optimizer_arrays, offset)},
        {"optimizer_meta", ckpt.optimizer_meta},
    };
    const std::string header_text = header.dump();

    std::string out;
    out.append(kMagic, sizeof(kMagic));
    put_u64(out, header_text.size());
    out.append(header_text);
    for (const auto& a : ckpt.arrays) {
        append_doubles(out, a.data);
    }
    for (const auto& a : ckpt.optimizer_arrays) {
        append_doubles(out, a.data);
    }

    std::ofstream file(path, std::ios::binary);
    if (!file) {
        throw IoError("cannot open checkpoint for writing: " + path);
    }
    file.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!file) {
        throw IoError("failed writing checkpoint " + path);
    }
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream file(path, std::ios::binary);
    if (!file) {
        throw IoError("cannot open checkpoint " + path);
    }
    std::string bytes((std::istreambuf_iterator<char>(file)), std::istreambuf_iterator<char>());
    const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());

    if (bytes.size() < sizeof(kMagic) + 8) {
        throw FormatError("checkpoint " + path + " is too short to hold the CMLP1 framing");
    }
    if (std::memcmp(p, kMagic, sizeof(kMagic)) != 0) {
        throw FormatError("checkpoint " + path + " does not start with the CMLP1 magic");
    }
    const std::uint64_t header_len = get_u64(p + sizeof(kMagic));
    const std::uint64_t header_start = sizeof(kMagic) + 8;
    if (header_start + header_len > bytes.size()) {
        throw FormatError("checkpoint " + path + " is truncated inside the header");
    }

    nlohmann::json header;
    try {
        header = nlohmann::json::parse(bytes.begin() + static_cast<std::ptrdiff_t>(header_start),
                                       bytes.begin() + static_cast<std::ptrdiff_t>(header_start + header_len));
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("checkpoint " + path + " header is not valid JSON: " + e.what());
    }

    Checkpoint ckpt;
    try {
        ckpt.version = header.at("version").get<int>();
        if (ckpt.version != 1) {
            throw FormatError("checkpoint " + path + " has unsupported format version " +
                              std::to_string(ckpt.version));
        }
        ckpt.model_config = header.at("model_config");
        ckpt.epoch = header.at("epoch").get<int>();
        ckpt.rng_seed = header.at("rng").at("seed").get<std::uint64_t>();
        ckpt.rng_state = header.at("rng").at("state").get<std::uint64_t>();
        ckpt.optimizer_meta = header.value("optimizer_meta", nlohmann::json());

        const unsigned char* blob = p + header_start + header_len;
        const std::uint64_t blob_size = bytes.size() - header_start - header_len;
        ckpt.arrays = read_table(header.at("arrays"), blob, blob_size);
        ckpt.optimizer_arrays = read_table(header.value("optimizer_arrays", nlohmann::json::array()),
                                           blob, blob_size);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("checkpoint " + path + " header is missing fields: " + e.what());
    }
    return ckpt;
}

Checkpoint make_checkpoint(CrowdMlp& model, const RngState& rng, int epoch) {
    Checkpoint ckpt;
    ckpt.model_config = model.config().to_json();
    ckpt.epoch = epoch;
    ckpt.rng_seed = rng.seed();
    ckpt.rng_state = rng.state();
    for (auto& p : model.parameters()) {
        ckpt.arrays.push_back({p.name, p.tensor.shape(), p.tensor.data()});
    }
    for (auto& b : model.buffers()) {
        ckpt.arrays.push_back({b.name, b.tensor.shape(), b.tensor.data()});
    }
    return ckpt;
}

void apply_checkpoint(const Checkpoint& ckpt, CrowdMlp& model) {
    std::unordered_map<std::string, const NamedArray*> by_name;
    for (const auto& a : ckpt.arrays) {
        by_name.emplace(a.name, &a);
    }
    auto restore = [&](ParamRef& ref) {
        auto it = by_name.find(ref.name);
        if (it == by_name.end()) {
            throw FormatError("checkpoint is missing array '" + ref.name + "'");
        }
        const NamedArray& a = *it->second;
        if (a.shape != ref.tensor.shape()) {
            throw DimensionError("checkpoint array '" + ref.name + "' has shape " +
                                 shape_str(a.shape) + " but the model expects " +
                                 shape_str(ref.tensor.shape()));
        }
        ref.tensor.data() = a.data;
        by_name.erase(it);
    };
    auto params = model.parameters();
    auto buffers = model.buffers();
    for (auto& p : params) {
        restore(p);
    }
    for (auto& b : buffers) {
        restore(b);
    }
    if (!by_name.empty()) {
        throw DimensionError("checkpoint carries array '" + by_name.begin()->first +
                             "' which this model configuration does not define");
    }
}

CrowdMlp model_from_checkpoint(const Checkpoint& ckpt) {
    const ModelConfig config = ModelConfig::from_json(ckpt.model_config);
    RngState rng(0);
    CrowdMlp model = CrowdMlp::init(config, rng);
    apply_checkpoint(ckpt, model);
    return model;
}

} // namespace crowdmlp

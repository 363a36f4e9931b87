#include "atta/checkpoint.hpp"

#include <json.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "atta/rng.hpp"

namespace atta {

using nlohmann::json;

namespace {

struct Section {
    std::string name;
    std::vector<int> shape;
    size_t offset = 0;  // in floats
};

struct Layout {
    std::vector<Section> sections;
    std::vector<const std::vector<float>*> payloads;
};

// The float vectors are enumerated in a fixed order; the manifest records
// names, shapes and offsets so a reader can validate before touching data.
Layout layout_of(const ModelCheckpoint& ckpt, std::vector<float>& calib_store) {
    Layout lay;
    size_t off = 0;
    auto add = [&](const std::string& name, std::vector<int> shape,
                   const std::vector<float>* payload) {
        lay.sections.push_back({name, std::move(shape), off});
        lay.payloads.push_back(payload);
        off += payload->size();
    };
    const auto& net = ckpt.net;
    for (size_t l = 0; l < net.blocks.size(); ++l) {
        const auto& b = net.blocks[l];
        const std::string p = "block" + std::to_string(l) + ".";
        add(p + "conv.weight", {b.conv.cout, b.conv.cin, 3, 3}, &b.conv.weight);
        add(p + "conv.bias", {b.conv.cout}, &b.conv.bias);
        add(p + "bn.gamma", {b.bn.channels()}, &b.bn.gamma);
        add(p + "bn.beta", {b.bn.channels()}, &b.bn.beta);
        add(p + "bn.mu_train", {b.bn.channels()}, &b.bn.mu_train);
        add(p + "bn.sigma_train", {b.bn.channels()}, &b.bn.sigma_train);
    }
    add("head.weight", {net.head.cout, net.head.cin}, &net.head.weight);
    add("head.bias", {net.head.cout}, &net.head.bias);
    calib_store = {ckpt.calib_a, ckpt.calib_b};
    add("calib", {2}, &calib_store);
    return lay;
}

json manifest_of(const ModelCheckpoint& ckpt, const Layout& lay, size_t total_floats) {
    json m;
    m["format"] = "atta-checkpoint";
    m["version"] = 1;
    json meta;
    meta["classes"] = ckpt.meta.classes;
    meta["widths"] = ckpt.meta.widths;
    meta["bn_layers"] = ckpt.net.bn_layers();
    meta["bn_epsilon"] = ckpt.net.blocks.empty() ? 1e-5 : ckpt.net.blocks[0].bn.epsilon;
    meta["train_seed"] = ckpt.meta.train_seed;
    meta["epochs_run"] = ckpt.meta.epochs_run;
    meta["train_accuracy"] = ckpt.meta.train_accuracy;
    meta["loss_per_epoch"] = ckpt.meta.loss_per_epoch;
    meta["feature_hash"] = ckpt.meta.feature_hash;
    meta["has_calibration"] = ckpt.meta.has_calibration;
    m["meta"] = meta;
    json secs = json::array();
    for (const auto& s : lay.sections) {
        json e;
        e["name"] = s.name;
        e["shape"] = s.shape;
        e["offset"] = s.offset;
        secs.push_back(e);
    }
    m["sections"] = secs;
    m["blob_floats"] = total_floats;
    return m;
}

std::string strip_suffix(const std::string& prefix) {
    if (prefix.size() > 5 && prefix.substr(prefix.size() - 5) == ".json")
        return prefix.substr(0, prefix.size() - 5);
    if (prefix.size() > 4 && prefix.substr(prefix.size() - 4) == ".bin")
        return prefix.substr(0, prefix.size() - 4);
    return prefix;
}

size_t numel_checked(const std::vector<int>& shape, const std::string& name) {
    size_t n = 1;
    for (int v : shape) {
        if (v <= 0) throw FormatError("checkpoint section '" + name + "' has invalid shape");
        n *= static_cast<size_t>(v);
    }
    return n;
}

}  // namespace

void save_checkpoint(const ModelCheckpoint& ckpt, const std::string& prefix) {
    const std::string base = strip_suffix(prefix);
    std::vector<float> calib_store;
    Layout lay = layout_of(ckpt, calib_store);
    size_t total = 0;
    for (const auto* p : lay.payloads) total += p->size();

    std::ofstream bin(base + ".bin", std::ios::binary | std::ios::trunc);
    if (!bin) throw FormatError("cannot open " + base + ".bin for writing");
    for (const auto* p : lay.payloads)
        bin.write(reinterpret_cast<const char*>(p->data()),
                  static_cast<std::streamsize>(p->size() * sizeof(float)));
    bin.close();
    if (!bin) throw FormatError("write failed for " + base + ".bin");

    std::ofstream js(base + ".json", std::ios::trunc);
    if (!js) throw FormatError("cannot open " + base + ".json for writing");
    js << manifest_of(ckpt, lay, total).dump(2) << "\n";
}

ModelCheckpoint load_checkpoint(const std::string& prefix) {
    const std::string base = strip_suffix(prefix);
    std::ifstream js(base + ".json");
    if (!js) throw FormatError("cannot open " + base + ".json");
    json m;
    try {
        js >> m;
    } catch (const json::exception& e) {
        throw FormatError("malformed checkpoint manifest: " + std::string(e.what()));
    }
    if (m.value("format", "") != "atta-checkpoint")
        throw FormatError("not an atta checkpoint manifest: " + base + ".json");

    std::ifstream bin(base + ".bin", std::ios::binary);
    if (!bin) throw FormatError("cannot open " + base + ".bin");
    bin.seekg(0, std::ios::end);
    const size_t bytes = static_cast<size_t>(bin.tellg());
    bin.seekg(0);
    const size_t expected_floats = m.at("blob_floats").get<size_t>();
    if (bytes != expected_floats * sizeof(float))
        throw FormatError("blob length mismatch in " + base + ".bin: manifest expects " +
                          std::to_string(expected_floats * sizeof(float)) + " bytes, file has " +
                          std::to_string(bytes));
    std::vector<float> blob(expected_floats);
    bin.read(reinterpret_cast<char*>(blob.data()), static_cast<std::streamsize>(bytes));
    if (!bin) throw FormatError("read failed for " + base + ".bin");

    const auto& meta = m.at("meta");
    ModelCheckpoint ckpt;
    ckpt.meta.classes = meta.at("classes").get<int>();
    ckpt.meta.widths = meta.at("widths").get<std::vector<int>>();
    ckpt.meta.train_seed = meta.at("train_seed").get<uint64_t>();
    ckpt.meta.epochs_run = meta.at("epochs_run").get<int>();
    ckpt.meta.train_accuracy = meta.at("train_accuracy").get<double>();
    ckpt.meta.loss_per_epoch = meta.at("loss_per_epoch").get<std::vector<double>>();
    ckpt.meta.feature_hash = meta.at("feature_hash").get<uint64_t>();
    ckpt.meta.has_calibration = meta.at("has_calibration").get<bool>();
    const int bn_layers = meta.at("bn_layers").get<int>();
    const float eps = meta.at("bn_epsilon").get<float>();
    if (static_cast<int>(ckpt.meta.widths.size()) != bn_layers + 1)
        throw FormatError("widths/bn_layers mismatch in manifest");

    auto& net = ckpt.net;
    net.blocks.resize(static_cast<size_t>(bn_layers));
    for (int l = 0; l < bn_layers; ++l) {
        auto& b = net.blocks[static_cast<size_t>(l)];
        b.conv.cin = ckpt.meta.widths[static_cast<size_t>(l)];
        b.conv.cout = ckpt.meta.widths[static_cast<size_t>(l) + 1];
        b.bn.epsilon = eps;
    }
    net.head.cin = ckpt.meta.widths.back();
    net.head.cout = ckpt.meta.classes;

    auto read_section = [&](const json& sec, std::vector<float>& dst,
                            const std::vector<int>& want_shape) {
        const std::string name = sec.at("name").get<std::string>();
        const auto shape = sec.at("shape").get<std::vector<int>>();
        const size_t offset = sec.at("offset").get<size_t>();
        if (shape != want_shape)
            throw FormatError("checkpoint section '" + name + "' shape mismatch");
        const size_t n = numel_checked(shape, name);
        if (offset + n > blob.size())
            throw FormatError("checkpoint section '" + name + "' at float offset " +
                              std::to_string(offset) + " overruns blob of " +
                              std::to_string(blob.size()) + " floats");
        dst.assign(blob.begin() + static_cast<long>(offset),
                   blob.begin() + static_cast<long>(offset + n));
    };

    const auto& secs = m.at("sections");
    size_t idx = 0;
    auto next = [&]() -> const json& {
        if (idx >= secs.size()) throw FormatError("checkpoint manifest is missing sections");
        return secs[idx++];
    };
    for (int l = 0; l < bn_layers; ++l) {
        auto& b = net.blocks[static_cast<size_t>(l)];
        read_section(next(), b.conv.weight, {b.conv.cout, b.conv.cin, 3, 3});
        read_section(next(), b.conv.bias, {b.conv.cout});
        read_section(next(), b.bn.gamma, {b.conv.cout});
        read_section(next(), b.bn.beta, {b.conv.cout});
        read_section(next(), b.bn.mu_train, {b.conv.cout});
        read_section(next(), b.bn.sigma_train, {b.conv.cout});
    }
    read_section(next(), net.head.weight, {net.head.cout, net.head.cin});
    read_section(next(), net.head.bias, {net.head.cout});
    std::vector<float> calib;
    read_section(next(), calib, {2});
    ckpt.calib_a = calib[0];
    ckpt.calib_b = calib[1];
    return ckpt;
}

std::string checkpoint_bytes(const ModelCheckpoint& ckpt) {
    std::vector<float> calib_store;
    Layout lay = layout_of(ckpt, calib_store);
    std::string out;
    for (const auto* p : lay.payloads)
        out.append(reinterpret_cast<const char*>(p->data()), p->size() * sizeof(float));
    std::ostringstream meta;
    meta << ckpt.meta.classes << '|' << ckpt.meta.train_seed << '|' << ckpt.meta.feature_hash;
    out += meta.str();
    return out;
}

Tensor make_probe_image(int channels, int h, int w) {
    Tensor img({channels, h, w});
    Rng rng(0xA77A5EEDull);
    for (auto& v : img.data) v = static_cast<float>(rng.uniform());
    return img;
}

uint64_t feature_probe_hash(const SegmentationNet& net) {
    Tensor probe = make_probe_image(net.input_channels(), 32, 32);
    BackboneResult r = forward_backbone(net, probe, training_stats(net));
    return fnv1a64(r.features.data.data(), r.features.data.size() * sizeof(float));
}

}  // namespace atta

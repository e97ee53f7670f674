#include "ugs/label_io.hpp"

#include <fstream>
#include <sstream>

#include "ugs/error.hpp"

namespace ugs {

Json rle_to_json(const RleMask& rle) {
    Json j;
    j["size"] = Json::array({rle.height, rle.width});
    j["counts"] = rle.counts;
    return j;
}

RleMask rle_from_json(const Json& j) {
    try {
        const auto& size = j.at("size");
        if (!size.is_array() || size.size() != 2) throw FormatError("rle size must be [H,W]");
        RleMask r;
        r.height = size.at(0).get<int>();
        r.width = size.at(1).get<int>();
        r.counts = j.at("counts").get<std::vector<std::uint32_t>>();
        return r;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("malformed rle: ") + e.what());
    }
}

Json granular_mask_to_json(const GranularMask& m) {
    Json j;
    j["mask"] = rle_to_json(rle_encode(m.mask));
    j["granularity"] = m.granularity;
    j["confidence"] = m.confidence;
    j["level"] = to_string(m.level);
    return j;
}

GranularMask granular_mask_from_json(const Json& j, int instance_id) {
    try {
        GranularMask m;
        m.mask = rle_decode(rle_from_json(j.at("mask")));
        m.granularity = j.at("granularity").get<double>();
        m.confidence = j.at("confidence").get<double>();
        m.level = mask_level_from_string(j.at("level").get<std::string>());
        m.instance_id = instance_id;
        return m;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("malformed granular mask: ") + e.what());
    }
}

Json labels_to_json(const PseudoLabelSet& labels) {
    Json j;
    j["image_id"] = labels.image_id;
    j["height"] = labels.height;
    j["width"] = labels.width;
    Json hs = Json::array();
    for (const auto& h : labels.hierarchies) {
        Json hj;
        hj["instance_id"] = h.instance_id;
        hj["root"] = granular_mask_to_json(h.root);
        Json children = Json::array();
        for (const auto& c : h.children) children.push_back(granular_mask_to_json(c));
        hj["children"] = std::move(children);
        hs.push_back(std::move(hj));
    }
    j["hierarchies"] = std::move(hs);
    return j;
}

PseudoLabelSet labels_from_json(const Json& j) {
    try {
        PseudoLabelSet labels;
        labels.image_id = j.at("image_id").get<std::string>();
        labels.height = j.at("height").get<int>();
        labels.width = j.at("width").get<int>();
        for (const auto& hj : j.at("hierarchies")) {
            MaskHierarchy h;
            h.instance_id = hj.at("instance_id").get<int>();
            h.root = granular_mask_from_json(hj.at("root"), h.instance_id);
            for (const auto& cj : hj.at("children")) {
                h.children.push_back(granular_mask_from_json(cj, h.instance_id));
            }
            labels.hierarchies.push_back(std::move(h));
        }
        return labels;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("malformed label set: ") + e.what());
    }
}

std::string dump_labels(const PseudoLabelSet& labels) { return labels_to_json(labels).dump(); }

void write_labels(const PseudoLabelSet& labels, const std::filesystem::path& path) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    out << dump_labels(labels) << '\n';
    if (!out) throw IoError("write failed for " + path.string());
}

PseudoLabelSet read_labels(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open label file " + path.string());
    Json j;
    try {
        j = Json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
    try {
        return labels_from_json(j);
    } catch (const FormatError& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
}

std::vector<BinaryMask> flatten_masks(const PseudoLabelSet& labels) {
    std::vector<BinaryMask> out;
    for (const auto& h : labels.hierarchies) {
        out.push_back(h.root.mask);
        for (const auto& c : h.children) out.push_back(c.mask);
    }
    return out;
}

}  // namespace ugs

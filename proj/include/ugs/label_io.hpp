#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "ugs/hierarchy.hpp"
#include "ugs/mask.hpp"

namespace ugs {

using Json = nlohmann::ordered_json;

// {"size":[H,W],"counts":[...]}
Json rle_to_json(const RleMask& rle);
RleMask rle_from_json(const Json& j);

// {"mask":RLE,"granularity":g,"confidence":c,"level":"..."}
Json granular_mask_to_json(const GranularMask& m);
GranularMask granular_mask_from_json(const Json& j, int instance_id);

Json labels_to_json(const PseudoLabelSet& labels);
PseudoLabelSet labels_from_json(const Json& j);

// Compact single-line serialization; byte-stable for identical inputs.
std::string dump_labels(const PseudoLabelSet& labels);

void write_labels(const PseudoLabelSet& labels, const std::filesystem::path& path);
PseudoLabelSet read_labels(const std::filesystem::path& path);

// Every mask in a label file, roots first within each hierarchy. Used for GT ingestion.
std::vector<BinaryMask> flatten_masks(const PseudoLabelSet& labels);

}  // namespace ugs

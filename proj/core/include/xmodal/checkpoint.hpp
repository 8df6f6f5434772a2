#pragma once

#include <string>

#include "xmodal/model.hpp"

namespace xmodal {

// Checkpoint file layout:
//   XMCK 1\n
//   meta <single-line JSON>\n
//   tensors <count>\n
//   <name> <rows> <cols> <kind> <byte-offset>\n   (one per tensor)
//   end\n
//   <float32 little-endian tensor data, column-major, in manifest order>
//
// Offsets are relative to the first byte after the header. Values are stored
// as float32 and widened on load, so save/load is a well-defined rounding.

struct Checkpoint {
  ParamStore params;
  std::string meta;  // JSON string, opaque to this layer
};

void save_checkpoint(const std::string& path, const ParamStore& params,
                     const std::string& meta_json = "{}");
Checkpoint load_checkpoint(const std::string& path);

// Rounds every tensor through float32 in place, producing the exact values a
// save/load round trip would yield.
void round_to_f32(ParamStore& params);

}  // namespace xmodal

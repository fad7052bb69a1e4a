#pragma once

#include <string>
#include <vector>

#include "biomoe/lifecycle.hpp"
#include "biomoe/model.hpp"

namespace biomoe {

/// Little-endian binary container, magic "BMOE1". Sections are named and
/// length-prefixed; the writer always emits them in one canonical order, so
/// save -> load -> save reproduces the file byte for byte.
std::vector<unsigned char> checkpoint_bytes(const UnifiedModel& model);
UnifiedModel model_from_bytes(const std::vector<unsigned char>& bytes);

void save_checkpoint(const UnifiedModel& model, const std::string& path);
UnifiedModel load_checkpoint(const std::string& path);

/// Stage-one bundles ride in the same container with a bundle marker.
std::vector<unsigned char> bundle_bytes(const StageOneBundle& bundle);
StageOneBundle bundle_from_bytes(const std::vector<unsigned char>& bytes);

void save_bundle(const StageOneBundle& bundle, const std::string& path);
StageOneBundle load_bundle(const std::string& path);

/// True when the file at `path` holds a stage-one bundle.
bool file_is_bundle(const std::string& path);

}  // namespace biomoe

#pragma once

#include <filesystem>
#include <ostream>
#include <string>

#include "widistill/coresets.hpp"
#include "widistill/models.hpp"

namespace widistill::cli {

/// Parses the command line and runs one subcommand. Returns 0 on success,
/// 2 for usage or config errors and 1 for runtime failures.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

// Artifact locations under the output directory.
std::filesystem::path train_pack_path(const std::filesystem::path& root);
std::filesystem::path test_pack_path(const std::filesystem::path& root);
std::filesystem::path buffer_dir(const std::filesystem::path& root, ModelKind arch);
std::filesystem::path expert_path(const std::filesystem::path& buffer, std::size_t index);
std::filesystem::path distilled_pack_path(const std::filesystem::path& root, ModelKind arch, std::size_t spc);
std::filesystem::path coreset_pack_path(const std::filesystem::path& root, CoresetMethod m, std::size_t spc);
std::filesystem::path reports_dir(const std::filesystem::path& root);

}  // namespace widistill::cli

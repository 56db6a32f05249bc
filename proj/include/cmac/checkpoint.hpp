#pragma once

#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "cmac/tape.hpp"

// Tensor record files:
//
//   CMAC-CKPT v1\n
//   <name>\n
//   <rank> <extent_0> ... <extent_{rank-1}>\n
//   <numel little-endian IEEE-754 doubles>
//   ... repeated until end of file
namespace cmac {

inline constexpr const char* kCheckpointMagic = "CMAC-CKPT v1";

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

// Raised when a checkpoint does not fit the model it is loaded into.
class CheckpointError : public FormatError {
 public:
  using FormatError::FormatError;
};

void write_tensor_records(std::ostream& os, std::span<const NamedTensor> records);
// Throws FormatError carrying the byte offset of the first malformed field.
std::vector<NamedTensor> read_tensor_records(std::istream& is);

void save_tensor_file(const std::filesystem::path& path, std::span<const NamedTensor> records);
std::vector<NamedTensor> load_tensor_file(const std::filesystem::path& path);

void save_checkpoint(const std::filesystem::path& path, std::span<Parameter* const> params);
// Every parameter must be present with an identical shape.
void load_checkpoint(const std::filesystem::path& path, std::span<Parameter* const> params);

}  // namespace cmac

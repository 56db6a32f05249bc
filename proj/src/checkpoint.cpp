#include "cmac/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>
#include <sstream>

namespace cmac {

namespace {

[[noreturn]] void format_error(std::istream& is, std::streamoff fallback, const std::string& what) {
  is.clear();
  std::streamoff off = is.tellg();
  if (off < 0) off = fallback;
  throw FormatError("tensor records: " + what + " at byte offset " + std::to_string(off));
}

void put_le(std::ostream& os, double v) {
  auto bits = std::bit_cast<std::uint64_t>(v);
  char bytes[8];
  for (int i = 0; i < 8; ++i) bytes[i] = static_cast<char>((bits >> (8 * i)) & 0xff);
  os.write(bytes, 8);
}

double get_le(const unsigned char* bytes) {
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(bytes[i]) << (8 * i);
  return std::bit_cast<double>(bits);
}

}  // namespace

void write_tensor_records(std::ostream& os, std::span<const NamedTensor> records) {
  os << kCheckpointMagic << '\n';
  for (const NamedTensor& rec : records) {
    if (rec.name.find('\n') != std::string::npos || rec.name.empty()) {
      throw ContractError("tensor record name must be a non-empty single line");
    }
    os << rec.name << '\n' << rec.tensor.rank();
    for (std::size_t e : rec.tensor.shape()) os << ' ' << e;
    os << '\n';
    for (double v : rec.tensor.data()) put_le(os, v);
  }
  if (!os) throw FormatError("tensor records: write failed");
}

std::vector<NamedTensor> read_tensor_records(std::istream& is) {
  std::string line;
  if (!std::getline(is, line) || line != kCheckpointMagic) format_error(is, 0, "missing 'CMAC-CKPT v1' header");
  std::vector<NamedTensor> out;
  while (true) {
    const std::streamoff rec_start = is.tellg();
    std::string name;
    if (!std::getline(is, name)) break;
    if (name.empty()) format_error(is, rec_start, "empty tensor name");
    const std::streamoff ext_start = is.tellg();
    std::string ext_line;
    if (!std::getline(is, ext_line)) format_error(is, ext_start, "truncated extent line for '" + name + "'");
    std::istringstream ext(ext_line);
    std::size_t rank = 0;
    if (!(ext >> rank) || rank > 8) format_error(is, ext_start, "bad rank for '" + name + "'");
    Shape shape(rank);
    for (auto& e : shape) {
      if (!(ext >> e)) format_error(is, ext_start, "bad extents for '" + name + "'");
    }
    std::string rest;
    if (ext >> rest) format_error(is, ext_start, "trailing data on extent line for '" + name + "'");
    const std::size_t n = shape_numel(shape);
    std::vector<unsigned char> raw(n * 8);
    const std::streamoff data_start = is.tellg();
    is.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    if (static_cast<std::size_t>(is.gcount()) != raw.size()) {
      throw FormatError("tensor records: truncated data for '" + name + "' at byte offset " +
                        std::to_string(data_start + is.gcount()));
    }
    std::vector<double> data(n);
    for (std::size_t i = 0; i < n; ++i) data[i] = get_le(raw.data() + 8 * i);
    out.push_back(NamedTensor{name, Tensor(std::move(shape), std::move(data))});
  }
  return out;
}

void save_tensor_file(const std::filesystem::path& path, std::span<const NamedTensor> records) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot open " + path.string() + " for writing");
  write_tensor_records(os, records);
}

std::vector<NamedTensor> load_tensor_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open " + path.string());
  try {
    return read_tensor_records(is);
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

void save_checkpoint(const std::filesystem::path& path, std::span<Parameter* const> params) {
  std::vector<NamedTensor> records;
  records.reserve(params.size());
  for (const Parameter* p : params) records.push_back({p->name, p->value});
  save_tensor_file(path, records);
}

void load_checkpoint(const std::filesystem::path& path, std::span<Parameter* const> params) {
  std::map<std::string, Tensor> by_name;
  for (auto& rec : load_tensor_file(path)) by_name[rec.name] = std::move(rec.tensor);
  for (Parameter* p : params) {
    auto it = by_name.find(p->name);
    if (it == by_name.end()) throw CheckpointError("checkpoint " + path.string() + " lacks tensor '" + p->name + "'");
    if (it->second.shape() != p->value.shape()) {
      throw CheckpointError("checkpoint tensor '" + p->name + "' has shape " + shape_str(it->second.shape()) +
                            " but the model expects " + shape_str(p->value.shape()));
    }
  }
  for (Parameter* p : params) p->value = by_name[p->name];
}

}  // namespace cmac

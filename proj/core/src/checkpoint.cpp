#include "xmodal/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <sstream>
#include <vector>

namespace xmodal {

namespace {

constexpr const char* kMagic = "XMCK";
constexpr int kVersion = 1;

TensorKind kind_from_int(int k) {
  switch (k) {
    case 0: return TensorKind::kTrainable;
    case 1: return TensorKind::kFrozen;
    case 2: return TensorKind::kBuffer;
    default: throw std::runtime_error("checkpoint: unknown tensor kind");
  }
}

int kind_to_int(TensorKind k) {
  switch (k) {
    case TensorKind::kTrainable: return 0;
    case TensorKind::kFrozen: return 1;
    case TensorKind::kBuffer: return 2;
  }
  return 0;
}

}  // namespace

void save_checkpoint(const std::string& path, const ParamStore& params,
                     const std::string& meta_json) {
  require(meta_json.find('\n') == std::string::npos,
          "checkpoint: meta must be a single line");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("checkpoint: cannot open for writing: " + path);

  std::ostringstream header;
  header << kMagic << ' ' << kVersion << '\n';
  header << "meta " << meta_json << '\n';
  header << "tensors " << params.size() << '\n';
  std::size_t offset = 0;
  for (const auto& t : params.tensors()) {
    header << t.name << ' ' << t.value.rows() << ' ' << t.value.cols() << ' '
           << kind_to_int(t.kind) << ' ' << offset << '\n';
    offset += static_cast<std::size_t>(t.value.size()) * sizeof(float);
  }
  header << "end\n";
  const std::string h = header.str();
  out.write(h.data(), static_cast<std::streamsize>(h.size()));

  std::vector<float> buf;
  for (const auto& t : params.tensors()) {
    buf.resize(static_cast<std::size_t>(t.value.size()));
    for (Eigen::Index i = 0; i < t.value.size(); ++i)
      buf[static_cast<std::size_t>(i)] = static_cast<float>(t.value.data()[i]);
    out.write(reinterpret_cast<const char*>(buf.data()),
              static_cast<std::streamsize>(buf.size() * sizeof(float)));
  }
  if (!out) throw std::runtime_error("checkpoint: write failed: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("checkpoint: cannot open: " + path);

  std::string magic;
  int version = -1;
  in >> magic >> version;
  if (magic != kMagic) throw std::runtime_error("checkpoint: bad magic in " + path);
  if (version != kVersion)
    throw std::runtime_error("checkpoint: unsupported version in " + path);
  in.ignore(1);

  std::string line;
  std::getline(in, line);
  if (line.rfind("meta ", 0) != 0)
    throw std::runtime_error("checkpoint: missing meta line in " + path);
  Checkpoint ck;
  ck.meta = line.substr(5);

  std::getline(in, line);
  std::size_t count = 0;
  {
    std::istringstream ls(line);
    std::string word;
    ls >> word >> count;
    if (word != "tensors")
      throw std::runtime_error("checkpoint: missing tensor manifest in " + path);
  }

  struct Entry {
    std::string name;
    Eigen::Index rows, cols;
    int kind;
    std::size_t offset;
  };
  std::vector<Entry> entries(count);
  for (auto& e : entries) {
    std::getline(in, line);
    std::istringstream ls(line);
    if (!(ls >> e.name >> e.rows >> e.cols >> e.kind >> e.offset))
      throw std::runtime_error("checkpoint: malformed manifest line in " + path);
  }
  std::getline(in, line);
  if (line != "end") throw std::runtime_error("checkpoint: missing end marker in " + path);

  const std::streampos data_start = in.tellg();
  std::vector<float> buf;
  for (const auto& e : entries) {
    buf.resize(static_cast<std::size_t>(e.rows * e.cols));
    in.seekg(data_start + static_cast<std::streamoff>(e.offset));
    in.read(reinterpret_cast<char*>(buf.data()),
            static_cast<std::streamsize>(buf.size() * sizeof(float)));
    if (!in) throw std::runtime_error("checkpoint: truncated tensor data in " + path);
    Matrix m(e.rows, e.cols);
    for (Eigen::Index i = 0; i < m.size(); ++i)
      m.data()[i] = static_cast<double>(buf[static_cast<std::size_t>(i)]);
    ck.params.add(e.name, std::move(m), kind_from_int(e.kind));
  }
  return ck;
}

void round_to_f32(ParamStore& params) {
  for (auto& t : params.tensors())
    for (Eigen::Index i = 0; i < t.value.size(); ++i)
      t.value.data()[i] = static_cast<double>(static_cast<float>(t.value.data()[i]));
}

}  // namespace xmodal

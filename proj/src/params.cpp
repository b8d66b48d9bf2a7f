#include "kgadapt/params.hpp"

#include <cstring>
#include <fstream>
#include <sstream>

namespace kgadapt {

std::string_view to_string(ParamGroup g) {
  switch (g) {
    case ParamGroup::gnn:
      return "gnn";
    case ParamGroup::temporal:
      return "temporal";
    case ParamGroup::decision:
      return "decision";
    case ParamGroup::token_embeddings:
      return "token_embeddings";
  }
  return "?";
}

Var Binder::bind(const Matrix& m, ParamGroup group) {
  auto it = vars_.find(&m);
  if (it != vars_.end()) return it->second;
  const Var v = tape_.leaf(m, trainable(group));
  vars_.emplace(&m, v);
  order_.emplace_back(&m, v);
  return v;
}

void Binder::collect(GradientMap& grads) const {
  for (const auto& [m, v] : order_) {
    const Matrix* g = tape_.grad(v);
    if (g == nullptr) continue;
    auto [it, inserted] = grads.try_emplace(m, *g);
    if (!inserted) {
      auto& dst = it->second.values();
      const auto& src = g->values();
      for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
    }
  }
}

namespace {

constexpr char kMagic[8] = {'K', 'G', 'A', 'C', 'K', 'P', 'T', '1'};
constexpr std::uint32_t kVersion = 1;

template <typename T>
void put_pod(std::string& out, const T& v) {
  out.append(reinterpret_cast<const char*>(&v), sizeof(T));
}

struct Reader {
  std::string_view bytes;
  std::size_t pos = 0;

  void take(void* dst, std::size_t n) {
    if (pos + n > bytes.size()) throw CheckpointError("truncated checkpoint");
    std::memcpy(dst, bytes.data() + pos, n);
    pos += n;
  }
  template <typename T>
  T pod() {
    T v{};
    take(&v, sizeof(T));
    return v;
  }
};

}  // namespace

const Matrix& Checkpoint::get(std::string_view name) const {
  for (const auto& [n, m] : entries) {
    if (n == name) return m;
  }
  throw CheckpointError("checkpoint has no entry '" + std::string(name) + "'");
}

bool Checkpoint::contains(std::string_view name) const {
  for (const auto& e : entries) {
    if (e.first == name) return true;
  }
  return false;
}

std::string Checkpoint::to_bytes() const {
  std::string out(kMagic, sizeof kMagic);
  put_pod(out, kVersion);
  put_pod<std::uint64_t>(out, entries.size());
  for (const auto& [name, m] : entries) {
    put_pod<std::uint64_t>(out, name.size());
    out += name;
    put_pod<std::uint64_t>(out, m.rows());
    put_pod<std::uint64_t>(out, m.cols());
    out.append(reinterpret_cast<const char*>(m.data()), m.size() * sizeof(double));
  }
  return out;
}

Checkpoint Checkpoint::from_bytes(std::string_view bytes) {
  Reader r{bytes};
  char magic[8];
  r.take(magic, sizeof magic);
  if (std::memcmp(magic, kMagic, sizeof magic) != 0) throw CheckpointError("not a checkpoint");
  const auto version = r.pod<std::uint32_t>();
  if (version != kVersion) {
    throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  }
  Checkpoint c;
  const auto count = r.pod<std::uint64_t>();
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto len = r.pod<std::uint64_t>();
    std::string name(len, '\0');
    r.take(name.data(), len);
    const auto rows = r.pod<std::uint64_t>();
    const auto cols = r.pod<std::uint64_t>();
    Matrix m(rows, cols);
    r.take(m.data(), m.size() * sizeof(double));
    c.put(std::move(name), std::move(m));
  }
  if (r.pos != bytes.size()) throw CheckpointError("trailing bytes after checkpoint");
  return c;
}

void Checkpoint::save(const std::string& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw CheckpointError("cannot write " + path);
  const std::string bytes = to_bytes();
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

Checkpoint Checkpoint::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return from_bytes(ss.str());
}

Checkpoint snapshot(const ParameterSet& params) {
  Checkpoint c;
  for (const auto& p : params) c.put(p.name, *p.value);
  return c;
}

void restore(const ParameterSet& params, const Checkpoint& ckpt) {
  for (const auto& p : params) {
    const Matrix& m = ckpt.get(p.name);
    if (!m.same_shape(*p.value)) {
      throw CheckpointError("shape of '" + p.name + "' is " + m.shape_string() + ", expected " +
                            p.value->shape_string());
    }
    *p.value = m;
  }
}

}  // namespace kgadapt

#include "biomoe/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>

namespace biomoe {

namespace {

constexpr char kMagic[5] = {'B', 'M', 'O', 'E', '1'};
constexpr std::uint32_t kVersion = 1;

// --- primitive little-endian encoding --------------------------------------

struct Writer {
  std::vector<unsigned char> out;

  void u8(std::uint8_t v) { out.push_back(v); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<unsigned char>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<unsigned char>(v >> (8 * i)));
  }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void str(const std::string& s) {
    u64(s.size());
    out.insert(out.end(), s.begin(), s.end());
  }
  void vec(const Vec& v) {
    u64(v.size());
    for (double x : v) f64(x);
  }
  void matrix(const Matrix& m) {
    u64(m.rows);
    u64(m.cols);
    for (double x : m.data) f64(x);
  }
};

struct Reader {
  const unsigned char* p;
  const unsigned char* end;

  void need(std::size_t n) const {
    if (static_cast<std::size_t>(end - p) < n)
      throw ConfigError("checkpoint: truncated file");
  }
  std::uint8_t u8() {
    need(1);
    return *p++;
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(*p++) << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(*p++) << (8 * i);
    return v;
  }
  double f64() { return std::bit_cast<double>(u64()); }
  std::string str() {
    const std::uint64_t n = u64();
    need(n);
    std::string s(reinterpret_cast<const char*>(p), n);
    p += n;
    return s;
  }
  Vec vec() {
    const std::uint64_t n = u64();
    Vec v(n);
    for (std::uint64_t i = 0; i < n; ++i) v[i] = f64();
    return v;
  }
  Matrix matrix() {
    const std::uint64_t r = u64();
    const std::uint64_t c = u64();
    need(r * c * 8);
    Matrix m(r, c);
    for (double& x : m.data) x = f64();
    return m;
  }
  bool done() const { return p == end; }
};

// --- named sections ---------------------------------------------------------

void begin_file(Writer& w) {
  w.out.insert(w.out.end(), kMagic, kMagic + 5);
  w.u32(kVersion);
}

void write_section(Writer& w, const std::string& name, const Writer& payload) {
  w.u32(static_cast<std::uint32_t>(name.size()));
  w.out.insert(w.out.end(), name.begin(), name.end());
  w.u64(payload.out.size());
  w.out.insert(w.out.end(), payload.out.begin(), payload.out.end());
}

Reader open_file(const std::vector<unsigned char>& bytes) {
  Reader r{bytes.data(), bytes.data() + bytes.size()};
  r.need(5 + 4);
  if (std::memcmp(r.p, kMagic, 5) != 0)
    throw ConfigError("checkpoint: bad magic");
  r.p += 5;
  const std::uint32_t version = r.u32();
  if (version != kVersion)
    throw ConfigError("checkpoint: unsupported version " + std::to_string(version));
  return r;
}

std::string read_section_name(Reader& r) {
  const std::uint32_t n = r.u32();
  r.need(n);
  std::string name(reinterpret_cast<const char*>(r.p), n);
  r.p += n;
  return name;
}

Reader section_payload(Reader& r) {
  const std::uint64_t len = r.u64();
  r.need(len);
  Reader payload{r.p, r.p + len};
  r.p += len;
  return payload;
}

// --- model pieces -----------------------------------------------------------

void write_config(Writer& w, const MoEConfig& c) {
  w.u64(c.d_model);
  w.u64(c.d_inner);
  w.u64(c.num_experts);
  w.u64(c.top_k);
  w.u64(c.width_factor);
  w.u64(c.num_landmarks);
  w.f64(c.tau);
  w.f64(c.noise_std);
  w.u64(c.seed);
}

MoEConfig read_config(Reader& r) {
  MoEConfig c;
  c.d_model = r.u64();
  c.d_inner = r.u64();
  c.num_experts = r.u64();
  c.top_k = r.u64();
  c.width_factor = r.u64();
  c.num_landmarks = r.u64();
  c.tau = r.f64();
  c.noise_std = r.f64();
  c.seed = r.u64();
  return c;
}

void write_ffn(Writer& w, const FeedForward& f) {
  w.matrix(f.w1);
  w.vec(f.b1);
  w.matrix(f.w2);
  w.vec(f.b2);
}

FeedForward read_ffn(Reader& r) {
  FeedForward f;
  f.w1 = r.matrix();
  f.b1 = r.vec();
  f.w2 = r.matrix();
  f.b2 = r.vec();
  return f;
}

void write_router(Writer& w, const Router& router) {
  w.matrix(router.weights);
  w.vec(router.bias);
}

Router read_router(Reader& r) {
  Router router;
  router.weights = r.matrix();
  router.bias = r.vec();
  return router;
}

void write_task(Writer& w, const TaskSlot& slot) {
  w.u8(static_cast<std::uint8_t>(slot.kind));
  w.str(slot.cloned_from);
  w.str(slot.parent_a);
  w.str(slot.parent_b);
  write_router(w, slot.gating);
  if (slot.kind == SlotKind::composed) write_router(w, slot.composition);
  w.u64(slot.lora.l1.rank);
  w.matrix(slot.lora.l1.a);
  w.matrix(slot.lora.l1.b);
  w.u64(slot.lora.l2.rank);
  w.matrix(slot.lora.l2.a);
  w.matrix(slot.lora.l2.b);
  w.vec(slot.lora.delta_b1);
  w.vec(slot.lora.delta_b2);
  w.matrix(slot.projection.weight);
  w.vec(slot.projection.bias);
}

TaskSlot read_task(Reader& r) {
  TaskSlot slot;
  const std::uint8_t kind = r.u8();
  if (kind > 2) throw ConfigError("checkpoint: bad task kind");
  slot.kind = static_cast<SlotKind>(kind);
  slot.cloned_from = r.str();
  slot.parent_a = r.str();
  slot.parent_b = r.str();
  slot.gating = read_router(r);
  if (slot.kind == SlotKind::composed) slot.composition = read_router(r);
  slot.lora.l1.rank = r.u64();
  slot.lora.l1.a = r.matrix();
  slot.lora.l1.b = r.matrix();
  slot.lora.l2.rank = r.u64();
  slot.lora.l2.a = r.matrix();
  slot.lora.l2.b = r.matrix();
  slot.lora.delta_b1 = r.vec();
  slot.lora.delta_b2 = r.vec();
  slot.projection.weight = r.matrix();
  slot.projection.bias = r.vec();
  return slot;
}

}  // namespace

std::vector<unsigned char> checkpoint_bytes(const UnifiedModel& model) {
  Writer w;
  begin_file(w);
  {
    Writer p;
    write_config(p, model.cfg);
    write_section(w, "config", p);
  }
  {
    Writer p;
    p.u64(model.cfg.seed);
    write_section(w, "seed", p);
  }
  {
    Writer p;
    p.str(model.provenance);
    write_section(w, "provenance", p);
  }
  {
    Writer p;
    write_ffn(p, model.global);
    write_section(w, "global", p);
  }
  for (std::size_t e = 0; e < model.routed.size(); ++e) {
    Writer p;
    write_ffn(p, model.routed[e]);
    write_section(w, "routed/" + std::to_string(e), p);
  }
  for (const auto& [id, slot] : model.registry) {
    Writer p;
    write_task(p, slot);
    write_section(w, "task/" + id, p);
  }
  return std::move(w.out);
}

UnifiedModel model_from_bytes(const std::vector<unsigned char>& bytes) {
  Reader r = open_file(bytes);
  UnifiedModel model;
  bool have_config = false, have_global = false;
  while (!r.done()) {
    const std::string name = read_section_name(r);
    Reader p = section_payload(r);
    if (name == "config") {
      model.cfg = read_config(p);
      have_config = true;
    } else if (name == "seed") {
      model.cfg.seed = p.u64();
    } else if (name == "provenance") {
      model.provenance = p.str();
    } else if (name == "global") {
      model.global = read_ffn(p);
      have_global = true;
    } else if (name.rfind("routed/", 0) == 0) {
      model.routed.push_back(read_ffn(p));
    } else if (name.rfind("task/", 0) == 0) {
      model.registry.emplace(name.substr(5), read_task(p));
    } else {
      throw ConfigError("checkpoint: unsupported section `" + name + "`");
    }
  }
  if (!have_config || !have_global)
    throw ConfigError("checkpoint: missing config or global section");
  if (model.routed.size() != model.cfg.num_experts)
    throw ConfigError("checkpoint: routed expert count mismatch");
  model.cfg.validate();
  return model;
}

namespace {

std::vector<unsigned char> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open checkpoint: " + path);
  return std::vector<unsigned char>(std::istreambuf_iterator<char>(in),
                                    std::istreambuf_iterator<char>());
}

void write_file(const std::string& path, const std::vector<unsigned char>& bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write checkpoint: " + path);
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) throw ConfigError("short write: " + path);
}

}  // namespace

void save_checkpoint(const UnifiedModel& model, const std::string& path) {
  write_file(path, checkpoint_bytes(model));
}

UnifiedModel load_checkpoint(const std::string& path) {
  return model_from_bytes(read_file(path));
}

std::vector<unsigned char> bundle_bytes(const StageOneBundle& bundle) {
  Writer w;
  begin_file(w);
  {
    Writer p;
    write_config(p, bundle.cfg);
    write_section(w, "bundle-config", p);
  }
  {
    Writer p;
    p.u64(bundle.seed);
    write_section(w, "seed", p);
  }
  for (std::size_t j = 0; j < bundle.tasks.size(); ++j) {
    const StageOneTask& t = bundle.tasks[j];
    Writer p;
    write_ffn(p, t.ffn);
    p.matrix(t.projection.weight);
    p.vec(t.projection.bias);
    p.f64(t.probe_grad_norm);
    p.f64(t.final_loss);
    p.vec(t.loss_curve);
    write_section(w, "s1task/" + std::to_string(j), p);
  }
  return std::move(w.out);
}

StageOneBundle bundle_from_bytes(const std::vector<unsigned char>& bytes) {
  Reader r = open_file(bytes);
  StageOneBundle bundle;
  bool have_config = false;
  while (!r.done()) {
    const std::string name = read_section_name(r);
    Reader p = section_payload(r);
    if (name == "bundle-config") {
      bundle.cfg = read_config(p);
      have_config = true;
    } else if (name == "seed") {
      bundle.seed = p.u64();
    } else if (name.rfind("s1task/", 0) == 0) {
      StageOneTask t;
      t.ffn = read_ffn(p);
      t.projection.weight = p.matrix();
      t.projection.bias = p.vec();
      t.probe_grad_norm = p.f64();
      t.final_loss = p.f64();
      t.loss_curve = p.vec();
      bundle.tasks.push_back(std::move(t));
    } else {
      throw ConfigError("bundle: unsupported section `" + name + "`");
    }
  }
  if (!have_config) throw ConfigError("bundle: missing config section");
  return bundle;
}

void save_bundle(const StageOneBundle& bundle, const std::string& path) {
  write_file(path, bundle_bytes(bundle));
}

StageOneBundle load_bundle(const std::string& path) {
  return bundle_from_bytes(read_file(path));
}

bool file_is_bundle(const std::string& path) {
  const std::vector<unsigned char> bytes = read_file(path);
  Reader r = open_file(bytes);
  if (r.done()) return false;
  return read_section_name(r) == "bundle-config";
}

}  // namespace biomoe

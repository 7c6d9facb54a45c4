#include "cpfn/model.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "cpfn/rng.hpp"

namespace cpfn {

using nlohmann::json;

LatentLaw latent_from_string(const std::string& name) {
  if (name == "uniform01") return LatentLaw::Uniform01;
  if (name == "standard_normal") return LatentLaw::StandardNormal;
  throw InvalidConfig("unknown latent law: " + name);
}

std::string to_string(LatentLaw law) {
  return law == LatentLaw::Uniform01 ? "uniform01" : "standard_normal";
}

ResponseTransform transform_from_string(const std::string& name) {
  if (name == "identity") return ResponseTransform::Identity;
  if (name == "log1p") return ResponseTransform::Log1p;
  throw InvalidConfig("unknown response transform: " + name);
}

std::string to_string(ResponseTransform t) {
  return t == ResponseTransform::Identity ? "identity" : "log1p";
}

std::vector<int> NetworkArchitecture::layer_dims() const {
  std::vector<int> dims;
  dims.reserve(hidden_widths.size() + 2);
  dims.push_back(in_dim);
  for (int w : hidden_widths) dims.push_back(w);
  dims.push_back(out_dim);
  return dims;
}

std::size_t NetworkArchitecture::parameter_count() const {
  const auto dims = layer_dims();
  std::size_t count = 0;
  for (std::size_t k = 1; k < dims.size(); ++k)
    count += static_cast<std::size_t>(dims[k - 1] + 1) * dims[k];
  return count;
}

std::vector<LayerOffsets> mlp_layout(const NetworkArchitecture& arch, std::size_t base_offset) {
  const auto dims = arch.layer_dims();
  std::vector<LayerOffsets> layers;
  layers.reserve(dims.size() - 1);
  std::size_t off = base_offset;
  for (std::size_t k = 1; k < dims.size(); ++k) {
    LayerOffsets l;
    l.in = dims[k - 1];
    l.out = dims[k];
    l.w = off;
    off += static_cast<std::size_t>(l.in) * l.out;
    l.b = off;
    off += static_cast<std::size_t>(l.out);
    layers.push_back(l);
  }
  return layers;
}

ColumnStats ColumnStats::identity(int dim) {
  ColumnStats s;
  s.mean.assign(static_cast<std::size_t>(dim), 0.0);
  s.std.assign(static_cast<std::size_t>(dim), 1.0);
  return s;
}

std::size_t CpfnModel::network_parameter_count() const {
  return phi_arch.parameter_count() + psi_arch.parameter_count();
}

Bandwidth CpfnModel::bandwidth() const {
  Bandwidth bw;
  const auto v = params.view("log_eps");
  bw.log_eps.assign(v.begin(), v.end());
  return bw;
}

void CpfnModel::set_bandwidth(const Bandwidth& bw) {
  if (bw.dim() != q) throw DimensionMismatch("bandwidth dimension must equal q");
  auto v = params.view("log_eps");
  std::copy(bw.log_eps.begin(), bw.log_eps.end(), v.begin());
}

void CpfnModel::validate() const {
  if (d < 1 || q < 1 || rank < 1) throw InvalidConfig("model dims must be positive");
  if (phi_arch.in_dim != d || phi_arch.out_dim != rank * q)
    throw InvalidConfig("phi architecture inconsistent with (d, r, q)");
  if (psi_arch.in_dim != q || psi_arch.out_dim != rank * q)
    throw InvalidConfig("psi architecture inconsistent with (q, r)");
  if (x_stats.dim() != d || y_stats.dim() != q)
    throw InvalidConfig("standardization stats have wrong dimension");
  for (double s : x_stats.std)
    if (!(s > 0.0)) throw InvalidConfig("x std must be positive");
  for (double s : y_stats.std)
    if (!(s > 0.0)) throw InvalidConfig("y std must be positive");
  if (params.size() != network_parameter_count() + static_cast<std::size_t>(q))
    throw InvalidConfig("parameter vector length inconsistent with architecture");
  params.check_finite();
}

namespace {

void add_mlp_segments(ParameterVector& params, const std::string& prefix,
                      const NetworkArchitecture& arch) {
  const auto dims = arch.layer_dims();
  for (std::size_t k = 1; k < dims.size(); ++k) {
    const std::string idx = std::to_string(k - 1);
    params.add_segment(prefix + ".W" + idx,
                       {static_cast<std::size_t>(dims[k]), static_cast<std::size_t>(dims[k - 1])});
    params.add_segment(prefix + ".b" + idx, {static_cast<std::size_t>(dims[k])});
  }
}

void glorot_init(ParameterVector& params, const NetworkArchitecture& arch,
                 const std::string& prefix, Rng& rng) {
  const auto dims = arch.layer_dims();
  for (std::size_t k = 1; k < dims.size(); ++k) {
    const std::string idx = std::to_string(k - 1);
    auto w = params.view(prefix + ".W" + idx);
    const double limit = std::sqrt(6.0 / (dims[k - 1] + dims[k]));
    for (double& x : w) x = rng.uniform(-limit, limit);
    // biases stay zero
  }
}

}  // namespace

CpfnModel init_model(int d, int q, int rank, const std::vector<int>& hidden_widths,
                     LatentLaw latent, KernelFamily kernel, std::span<const double> eps0,
                     std::uint64_t seed) {
  if (d < 1 || q < 1 || rank < 1) throw InvalidConfig("init_model: dims must be positive");
  for (int w : hidden_widths)
    if (w < 1) throw InvalidConfig("init_model: hidden widths must be positive");
  if (eps0.size() != 1 && eps0.size() != static_cast<std::size_t>(q))
    throw InvalidConfig("init_model: eps0 must be scalar or length q");
  for (double e : eps0)
    if (!(e > 0.0)) throw InvalidConfig("init_model: eps0 must be positive");

  CpfnModel m;
  m.d = d;
  m.q = q;
  m.rank = rank;
  m.latent = latent;
  m.kernel = KernelSpec{kernel, q};
  m.phi_arch = NetworkArchitecture{d, rank * q, hidden_widths, Activation::Gelu,
                                   Activation::Identity};
  m.psi_arch = NetworkArchitecture{q, rank * q, hidden_widths, Activation::Gelu,
                                   Activation::Gelu};
  add_mlp_segments(m.params, "phi", m.phi_arch);
  add_mlp_segments(m.params, "psi", m.psi_arch);
  m.params.add_segment("log_eps", {static_cast<std::size_t>(q)});

  Rng rng(seed);
  glorot_init(m.params, m.phi_arch, "phi", rng);
  glorot_init(m.params, m.psi_arch, "psi", rng);
  auto log_eps = m.params.view("log_eps");
  for (int j = 0; j < q; ++j)
    log_eps[j] = std::log(eps0.size() == 1 ? eps0[0] : eps0[static_cast<std::size_t>(j)]);

  m.x_stats = ColumnStats::identity(d);
  m.y_stats = ColumnStats::identity(q);
  m.seed = seed;
  return m;
}

CpfnModel init_model(int d, int q, int rank, const std::vector<int>& hidden_widths,
                     LatentLaw latent, KernelFamily kernel, double eps0, std::uint64_t seed) {
  return init_model(d, q, rank, hidden_widths, latent, kernel, std::span<const double>{&eps0, 1},
                    seed);
}

std::vector<double> mlp_forward(const NetworkArchitecture& arch,
                                std::span<const double> params_slice,
                                std::span<const double> input) {
  if (static_cast<int>(input.size()) != arch.in_dim)
    throw DimensionMismatch("mlp_forward: input length mismatch");
  if (params_slice.size() < arch.parameter_count())
    throw DimensionMismatch("mlp_forward: parameter slice too short");

  const auto layers = mlp_layout(arch, 0);
  std::vector<double> cur(input.begin(), input.end());
  std::vector<double> next;
  for (std::size_t k = 0; k < layers.size(); ++k) {
    const auto& l = layers[k];
    const double* W = params_slice.data() + l.w;
    const double* b = params_slice.data() + l.b;
    next.assign(static_cast<std::size_t>(l.out), 0.0);
    for (int o = 0; o < l.out; ++o) {
      const double* wrow = W + static_cast<std::size_t>(o) * l.in;
      double acc = b[o];
      for (int i = 0; i < l.in; ++i) acc += wrow[i] * cur[static_cast<std::size_t>(i)];
      next[static_cast<std::size_t>(o)] = acc;
    }
    const bool last = (k + 1 == layers.size());
    const Activation act = last ? arch.output_activation : arch.hidden_activation;
    if (act == Activation::Gelu)
      for (double& v : next) v = gelu(v);
    cur.swap(next);
  }
  return cur;
}

std::vector<double> cpfn_forward(const CpfnModel& model, std::span<const double> x,
                                 std::span<const double> u) {
  if (static_cast<int>(x.size()) != model.d || static_cast<int>(u.size()) != model.q)
    throw DimensionMismatch("cpfn_forward: input dimensions mismatch");
  const std::size_t phi_size = model.phi_arch.parameter_count();
  const std::size_t psi_size = model.psi_arch.parameter_count();
  const auto phi = mlp_forward(model.phi_arch,
                               {model.params.data() + model.phi_offset(), phi_size}, x);
  const auto psi = mlp_forward(model.psi_arch,
                               {model.params.data() + model.psi_offset(), psi_size}, u);
  std::vector<double> out(static_cast<std::size_t>(model.q), 0.0);
  for (int j = 0; j < model.q; ++j) {
    double acc = 0.0;
    for (int i = 0; i < model.rank; ++i) {
      const std::size_t e = static_cast<std::size_t>(i) * model.q + j;
      acc += phi[e] * psi[e];
    }
    out[static_cast<std::size_t>(j)] = acc;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

namespace {

constexpr int kSchemaVersion = 1;

std::uint64_t fnv1a64(const void* data, std::size_t n, std::uint64_t h = 0xcbf29ce484222325ULL) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::uint64_t model_checksum(const CpfnModel& m) {
  std::uint64_t h = fnv1a64(m.params.data(), m.params.size() * sizeof(double));
  h = fnv1a64(m.x_stats.mean.data(), m.x_stats.mean.size() * sizeof(double), h);
  h = fnv1a64(m.x_stats.std.data(), m.x_stats.std.size() * sizeof(double), h);
  h = fnv1a64(m.y_stats.mean.data(), m.y_stats.mean.size() * sizeof(double), h);
  h = fnv1a64(m.y_stats.std.data(), m.y_stats.std.size() * sizeof(double), h);
  return h;
}

json arch_to_json(const NetworkArchitecture& a) {
  return json{{"in_dim", a.in_dim},
              {"out_dim", a.out_dim},
              {"hidden_widths", a.hidden_widths},
              {"hidden_activation", "gelu"},
              {"output_activation", a.output_activation == Activation::Gelu ? "gelu" : "identity"}};
}

NetworkArchitecture arch_from_json(const json& j) {
  NetworkArchitecture a;
  a.in_dim = j.at("in_dim").get<int>();
  a.out_dim = j.at("out_dim").get<int>();
  a.hidden_widths = j.at("hidden_widths").get<std::vector<int>>();
  a.hidden_activation = Activation::Gelu;
  a.output_activation =
      j.at("output_activation").get<std::string>() == "gelu" ? Activation::Gelu
                                                             : Activation::Identity;
  return a;
}

}  // namespace

std::string serialize_model(const CpfnModel& model) {
  model.validate();
  json segs = json::array();
  for (const auto& s : model.params.segments())
    segs.push_back(json{{"name", s.name}, {"offset", s.offset}, {"shape", s.shape}});

  json j{{"kind", "cpfn-model"},
         {"schema_version", kSchemaVersion},
         {"d", model.d},
         {"q", model.q},
         {"rank", model.rank},
         {"phi_arch", arch_to_json(model.phi_arch)},
         {"psi_arch", arch_to_json(model.psi_arch)},
         {"kernel", json{{"family", to_string(model.kernel.family)}, {"dim", model.kernel.dim}}},
         {"latent", to_string(model.latent)},
         {"y_transform", to_string(model.y_transform)},
         {"x_stats", json{{"mean", model.x_stats.mean}, {"std", model.x_stats.std}}},
         {"y_stats", json{{"mean", model.y_stats.mean}, {"std", model.y_stats.std}}},
         {"params", json{{"segments", segs}, {"values", model.params.values()}}},
         {"checksum", hex64(model_checksum(model))},
         {"seed", model.seed},
         {"config_hash", model.config_hash}};
  return j.dump(2);
}

CpfnModel deserialize_model(const std::string& bytes) {
  json j;
  try {
    j = json::parse(bytes);
  } catch (const json::exception& e) {
    throw CorruptModel(std::string("model parse failure: ") + e.what());
  }
  try {
    if (j.at("kind").get<std::string>() != "cpfn-model")
      throw CorruptModel("not a cpfn model file");
    if (j.at("schema_version").get<int>() != kSchemaVersion)
      throw CorruptModel("unsupported model schema version");

    CpfnModel m;
    m.d = j.at("d").get<int>();
    m.q = j.at("q").get<int>();
    m.rank = j.at("rank").get<int>();
    m.phi_arch = arch_from_json(j.at("phi_arch"));
    m.psi_arch = arch_from_json(j.at("psi_arch"));
    m.kernel.family = kernel_family_from_string(j.at("kernel").at("family").get<std::string>());
    m.kernel.dim = j.at("kernel").at("dim").get<int>();
    m.latent = latent_from_string(j.at("latent").get<std::string>());
    m.y_transform = transform_from_string(j.at("y_transform").get<std::string>());
    m.x_stats.mean = j.at("x_stats").at("mean").get<std::vector<double>>();
    m.x_stats.std = j.at("x_stats").at("std").get<std::vector<double>>();
    m.y_stats.mean = j.at("y_stats").at("mean").get<std::vector<double>>();
    m.y_stats.std = j.at("y_stats").at("std").get<std::vector<double>>();
    m.seed = j.value("seed", std::uint64_t{0});
    m.config_hash = j.value("config_hash", std::string{});

    const auto values = j.at("params").at("values").get<std::vector<double>>();
    std::size_t expected_offset = 0;
    for (const auto& js : j.at("params").at("segments")) {
      const auto name = js.at("name").get<std::string>();
      const auto offset = js.at("offset").get<std::size_t>();
      const auto shape = js.at("shape").get<std::vector<std::size_t>>();
      if (offset != expected_offset) throw CorruptModel("non-contiguous parameter segments");
      expected_offset = m.params.add_segment(name, shape) + m.params.segment(name).size();
    }
    if (m.params.size() != values.size()) throw CorruptModel("parameter value count mismatch");
    std::copy(values.begin(), values.end(), m.params.values().begin());

    const auto stored = j.at("checksum").get<std::string>();
    if (stored != hex64(model_checksum(m))) throw CorruptModel("model checksum mismatch");
    m.validate();
    return m;
  } catch (const json::exception& e) {
    throw CorruptModel(std::string("model field failure: ") + e.what());
  }
}

void write_model_file(const CpfnModel& model, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot open model file for writing: " + path);
  out << serialize_model(model) << "\n";
}

CpfnModel read_model_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open model file: " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return deserialize_model(ss.str());
}

}  // namespace cpfn

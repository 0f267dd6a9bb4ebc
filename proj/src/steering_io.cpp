#include "steerlab/steering_io.hpp"

#include <fstream>
#include <ostream>

#include "binary_io.hpp"

namespace steerlab {

namespace {

void put(std::ostream& os, const auto& m) {
  const Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> f = m.template cast<float>();
  detail::write_f32(os, std::span<const float>(f.data(), static_cast<std::size_t>(f.size())));
}

template <typename M>
void get(std::istream& is, M& m) {
  Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> f(m.rows(), m.cols());
  detail::read_f32(is, std::span<float>(f.data(), static_cast<std::size_t>(f.size())));
  m = f.template cast<double>();
}

void check_size(std::istream& is, std::uint64_t floats, const char* what) {
  const std::uint64_t expected = floats * 4;
  const std::uint64_t actual = detail::remaining_bytes(is);
  if (actual != expected)
    throw SteeringError(std::string(what) + " payload size mismatch: expected " + std::to_string(expected) +
                        " bytes, got " + std::to_string(actual));
}

std::ofstream open_out(const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw SteeringError("cannot open for writing: " + path.string());
  return os;
}

std::ifstream open_in(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw SteeringError("cannot open: " + path.string());
  return is;
}

}  // namespace

void save_steering_model(const SteeringModel& model, std::ostream& os) {
  model.validate();
  nlohmann::json h = {{"clusters", model.clusters},
                      {"num_layers", model.num_layers},
                      {"dim", model.dim},
                      {"site", std::string(to_string(model.site))},
                      {"reduction", std::string(to_string(model.reduction))},
                      {"alpha", model.alpha},
                      {"labels", model.labels}};
  detail::write_header(os, "STRM", kSteeringVersion, h);
  for (int k = 0; k < model.clusters; ++k)
    for (const auto& c : model.centroids) put(os, c.row(k));
  for (const auto& p : model.probes) {
    put(os, p.weight);
    put(os, p.bias);
  }
  if (!os) throw SteeringError("steering model write failed");
}

void save_steering_model(const SteeringModel& model, const std::filesystem::path& path) {
  auto os = open_out(path);
  save_steering_model(model, os);
}

SteeringModel load_steering_model(std::istream& is) {
  try {
    const auto h = detail::read_header(is, "STRM", kSteeringVersion);
    SteeringModel m;
    m.clusters = h.json.at("clusters").get<int>();
    m.num_layers = h.json.at("num_layers").get<int>();
    m.dim = h.json.at("dim").get<int>();
    m.site = site_kind_from_string(h.json.at("site").get<std::string>());
    m.reduction = reduction_from_string(h.json.at("reduction").get<std::string>());
    m.alpha = h.json.at("alpha").get<double>();
    m.labels = h.json.at("labels").get<std::vector<int>>();
    if (m.clusters < 1 || m.num_layers < 1 || m.dim < 1) throw SteeringError("steering model: bad dimensions");
    const auto C = static_cast<std::uint64_t>(m.clusters), L = static_cast<std::uint64_t>(m.num_layers),
               D = static_cast<std::uint64_t>(m.dim);
    check_size(is, C * L * D + L * (C * D + C), "steering model");
    m.centroids.assign(L, RowMatrix<double>(m.clusters, m.dim));
    for (int k = 0; k < m.clusters; ++k)
      for (auto& c : m.centroids) {
        Eigen::RowVectorXd row(m.dim);
        get(is, row);
        c.row(k) = row;
      }
    for (int l = 0; l < m.num_layers; ++l) {
      LinearProbe p = LinearProbe::zeros(m.clusters, m.dim);
      get(is, p.weight);
      Eigen::RowVectorXd b(m.clusters);
      get(is, b);
      p.bias = b.transpose();
      m.probes.push_back(std::move(p));
    }
    m.validate();
    return m;
  } catch (const detail::FormatError& e) {
    throw SteeringError(std::string("steering model: ") + e.what());
  } catch (const nlohmann::json::exception& e) {
    throw SteeringError(std::string("steering model header: ") + e.what());
  }
}

SteeringModel load_steering_model(const std::filesystem::path& path) {
  auto is = open_in(path);
  return load_steering_model(is);
}

void save_diffset(const DiffSet& diffs, std::ostream& os) {
  diffs.validate();
  nlohmann::json h = {{"count", diffs.deltas.size()},
                      {"num_layers", diffs.num_layers},
                      {"dim", diffs.dim},
                      {"site", std::string(to_string(diffs.site))},
                      {"reduction", std::string(to_string(diffs.reduction))},
                      {"ids", diffs.ids}};
  detail::write_header(os, "DSET", kDiffSetVersion, h);
  for (const auto& d : diffs.deltas) put(os, d);
  if (!os) throw SteeringError("diff set write failed");
}

void save_diffset(const DiffSet& diffs, const std::filesystem::path& path) {
  auto os = open_out(path);
  save_diffset(diffs, os);
}

DiffSet load_diffset(std::istream& is) {
  try {
    const auto h = detail::read_header(is, "DSET", kDiffSetVersion);
    DiffSet d;
    d.num_layers = h.json.at("num_layers").get<int>();
    d.dim = h.json.at("dim").get<int>();
    d.site = site_kind_from_string(h.json.at("site").get<std::string>());
    d.reduction = reduction_from_string(h.json.at("reduction").get<std::string>());
    d.ids = h.json.at("ids").get<std::vector<std::string>>();
    const auto count = h.json.at("count").get<std::uint64_t>();
    if (count != d.ids.size()) throw SteeringError("diff set: id count does not match header count");
    if (d.num_layers < 1 || d.dim < 1) throw SteeringError("diff set: bad dimensions");
    check_size(is, count * static_cast<std::uint64_t>(d.num_layers) * static_cast<std::uint64_t>(d.dim), "diff set");
    d.deltas.assign(count, RowMatrix<double>(d.num_layers, d.dim));
    for (auto& m : d.deltas) get(is, m);
    d.validate();
    return d;
  } catch (const detail::FormatError& e) {
    throw SteeringError(std::string("diff set: ") + e.what());
  } catch (const nlohmann::json::exception& e) {
    throw SteeringError(std::string("diff set header: ") + e.what());
  }
}

DiffSet load_diffset(const std::filesystem::path& path) {
  auto is = open_in(path);
  return load_diffset(is);
}

void write_diff_csv(const DiffSet& diffs, std::ostream& out) {
  out << "id";
  for (int l = 0; l < diffs.num_layers; ++l)
    for (int j = 0; j < diffs.dim; ++j) out << ",l" << l << "_d" << j;
  out << '\n';
  out.precision(9);
  for (std::size_t i = 0; i < diffs.deltas.size(); ++i) {
    out << '"' << diffs.ids[i] << '"';
    const auto& d = diffs.deltas[i];
    for (Eigen::Index k = 0; k < d.size(); ++k) out << ',' << d.data()[k];
    out << '\n';
  }
}

void write_norm_profile_csv(const std::vector<double>& profile, std::ostream& out) {
  out << "layer,mean_l2_norm\n";
  out.precision(17);
  for (std::size_t l = 0; l < profile.size(); ++l) out << l << ',' << profile[l] << '\n';
}

}  // namespace steerlab

#pragma once

#include <tsrl/data.hpp>

#include <hdf5.h>
#include <nlohmann/json.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>

namespace tsrl::data {

namespace h5 {

struct FileHandle {
  hid_t id = H5I_INVALID_HID;
  ~FileHandle() {
    if (id >= 0) H5Fclose(id);
  }
};

struct Dset {
  hid_t id = H5I_INVALID_HID;
  ~Dset() {
    if (id >= 0) H5Dclose(id);
  }
};

struct Space {
  hid_t id = H5I_INVALID_HID;
  ~Space() {
    if (id >= 0) H5Sclose(id);
  }
};

inline bool has_key(hid_t file, const std::string& key) {
  return H5Lexists(file, key.c_str(), H5P_DEFAULT) > 0;
}

/// Reads a 1-D or 2-D numeric dataset as double, one row per sample.
inline Matd read_matrix(hid_t file, const std::string& key) {
  Dset d{H5Dopen2(file, key.c_str(), H5P_DEFAULT)};
  if (d.id < 0) throw FormatError("hdf5: cannot open key '" + key + "'");
  Space sp{H5Dget_space(d.id)};
  const int rank = H5Sget_simple_extent_ndims(sp.id);
  if (rank != 1 && rank != 2)
    throw FormatError("hdf5: key '" + key + "' has unsupported rank " + std::to_string(rank));
  hsize_t dims[2] = {0, 1};
  H5Sget_simple_extent_dims(sp.id, dims, nullptr);
  const auto rows = static_cast<Eigen::Index>(dims[0]);
  const auto cols = static_cast<Eigen::Index>(rank == 2 ? dims[1] : 1);
  // HDF5 is row-major; read into a row-major buffer then map.
  std::vector<double> buf(static_cast<std::size_t>(rows * cols));
  if (H5Dread(d.id, H5T_NATIVE_DOUBLE, H5S_ALL, H5S_ALL, H5P_DEFAULT, buf.data()) < 0)
    throw FormatError("hdf5: failed reading key '" + key + "'");
  Matd m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r)
    for (Eigen::Index c = 0; c < cols; ++c)
      m(r, c) = buf[static_cast<std::size_t>(r * cols + c)];
  return m;
}

inline std::vector<std::uint8_t> read_flags(hid_t file, const std::string& key) {
  Matd m = read_matrix(file, key);
  std::vector<std::uint8_t> out(static_cast<std::size_t>(m.rows()));
  for (Eigen::Index i = 0; i < m.rows(); ++i) out[static_cast<std::size_t>(i)] = m(i, 0) != 0.0;
  return out;
}

inline void write_matrix(hid_t file, const std::string& key, const Matd& m, bool as_vector) {
  hsize_t dims[2] = {static_cast<hsize_t>(m.rows()), static_cast<hsize_t>(m.cols())};
  Space sp{H5Screate_simple(as_vector ? 1 : 2, dims, nullptr)};
  Dset d{H5Dcreate2(file, key.c_str(), H5T_NATIVE_DOUBLE, sp.id, H5P_DEFAULT, H5P_DEFAULT,
                    H5P_DEFAULT)};
  if (d.id < 0) throw FormatError("hdf5: cannot create key '" + key + "'");
  std::vector<double> buf(static_cast<std::size_t>(m.size()));
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c)
      buf[static_cast<std::size_t>(r * m.cols() + c)] = m(r, c);
  if (H5Dwrite(d.id, H5T_NATIVE_DOUBLE, H5S_ALL, H5S_ALL, H5P_DEFAULT, buf.data()) < 0)
    throw FormatError("hdf5: failed writing key '" + key + "'");
}

}  // namespace h5

namespace columnar {

inline void write_array(const std::filesystem::path& path, const Matd& m) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw FormatError("columnar: cannot write " + path.string());
  f.write(reinterpret_cast<const char*>(m.data()),
          static_cast<std::streamsize>(sizeof(double) * static_cast<std::size_t>(m.size())));
}

inline Matd read_array(const std::filesystem::path& path, Eigen::Index rows, Eigen::Index cols) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FormatError("columnar: cannot read " + path.string());
  Matd m(rows, cols);
  f.read(reinterpret_cast<char*>(m.data()),
         static_cast<std::streamsize>(sizeof(double) * static_cast<std::size_t>(m.size())));
  if (!f) throw FormatError("columnar: short read on " + path.string());
  return m;
}

}  // namespace columnar

namespace detail {

/// Fills in next_observations by shifting observations one row within each
/// trajectory; the final row of a trajectory keeps its own observation.
inline void derive_next_states(TransitionDataset& d) {
  d.next_states = d.states;
  const auto trajs = split_trajectories(d);
  for (const Trajectory& t : trajs)
    for (Eigen::Index i = t.start; i + 1 < t.end; ++i)
      d.next_states.row(i) = d.states.row(i + 1);
}

}  // namespace detail

/// Keyed-array container: observations/actions/rewards/terminals plus
/// optional timeouts and next_observations.
inline TransitionDataset load_dataset_hdf5(const std::filesystem::path& path) {
  h5::FileHandle f{H5Fopen(path.string().c_str(), H5F_ACC_RDONLY, H5P_DEFAULT)};
  if (f.id < 0) throw FormatError("hdf5: cannot open file " + path.string());
  for (const char* key : {"observations", "actions", "rewards", "terminals"})
    if (!h5::has_key(f.id, key))
      throw FormatError("hdf5: missing required key '" + std::string(key) + "' in " +
                        path.string());
  TransitionDataset d;
  d.name = path.stem().string();
  d.states = h5::read_matrix(f.id, "observations");
  d.actions = h5::read_matrix(f.id, "actions");
  d.rewards = h5::read_matrix(f.id, "rewards").col(0);
  d.terminals = h5::read_flags(f.id, "terminals");
  if (h5::has_key(f.id, "timeouts")) d.timeouts = h5::read_flags(f.id, "timeouts");
  if (h5::has_key(f.id, "next_observations"))
    d.next_states = h5::read_matrix(f.id, "next_observations");
  else
    detail::derive_next_states(d);
  d.validate();
  return d;
}

inline void save_dataset_hdf5(const TransitionDataset& d, const std::filesystem::path& path) {
  h5::FileHandle f{H5Fcreate(path.string().c_str(), H5F_ACC_TRUNC, H5P_DEFAULT, H5P_DEFAULT)};
  if (f.id < 0) throw FormatError("hdf5: cannot create file " + path.string());
  h5::write_matrix(f.id, "observations", d.states, false);
  h5::write_matrix(f.id, "actions", d.actions, false);
  h5::write_matrix(f.id, "rewards", Matd(d.rewards), true);
  h5::write_matrix(f.id, "next_observations", d.next_states, false);
  auto flags_to_mat = [&](const std::vector<std::uint8_t>& v) {
    Matd m = Matd::Zero(d.n(), 1);
    for (Eigen::Index i = 0; i < d.n(); ++i)
      if (i < static_cast<Eigen::Index>(v.size()) && v[static_cast<std::size_t>(i)]) m(i, 0) = 1.0;
    return m;
  };
  h5::write_matrix(f.id, "terminals", flags_to_mat(d.terminals), true);
  h5::write_matrix(f.id, "timeouts", flags_to_mat(d.timeouts), true);
}

/// Plain columnar fallback: a directory holding one little-endian float64
/// binary per key plus a manifest.json with shapes.
inline void save_dataset_columnar(const TransitionDataset& d, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  nlohmann::json manifest;
  manifest["format"] = "tsrl-columnar";
  manifest["version"] = 1;
  manifest["name"] = d.name;
  auto put = [&](const std::string& key, const Matd& m) {
    columnar::write_array(dir / (key + ".f64"), m);
    manifest["keys"][key] = {{"rows", m.rows()}, {"cols", m.cols()}, {"file", key + ".f64"}};
  };
  put("observations", d.states);
  put("actions", d.actions);
  put("rewards", Matd(d.rewards));
  put("next_observations", d.next_states);
  auto flags_to_mat = [&](const std::vector<std::uint8_t>& v) {
    Matd m = Matd::Zero(d.n(), 1);
    for (Eigen::Index i = 0; i < d.n(); ++i)
      if (i < static_cast<Eigen::Index>(v.size()) && v[static_cast<std::size_t>(i)]) m(i, 0) = 1.0;
    return m;
  };
  put("terminals", flags_to_mat(d.terminals));
  put("timeouts", flags_to_mat(d.timeouts));
  std::ofstream mf(dir / "manifest.json");
  mf << manifest.dump(2) << "\n";
}

inline TransitionDataset load_dataset_columnar(const std::filesystem::path& dir) {
  const auto manifest_path =
      std::filesystem::is_directory(dir) ? dir / "manifest.json" : dir;
  std::ifstream mf(manifest_path);
  if (!mf) throw FormatError("columnar: missing manifest " + manifest_path.string());
  nlohmann::json manifest;
  try {
    mf >> manifest;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("columnar: bad manifest " + manifest_path.string() + ": " + e.what());
  }
  const auto base = manifest_path.parent_path();
  auto get = [&](const std::string& key) -> std::optional<Matd> {
    if (!manifest.contains("keys") || !manifest["keys"].contains(key)) return std::nullopt;
    const auto& k = manifest["keys"][key];
    return columnar::read_array(base / k["file"].get<std::string>(),
                                k["rows"].get<Eigen::Index>(), k["cols"].get<Eigen::Index>());
  };
  auto require = [&](const std::string& key) {
    auto m = get(key);
    if (!m) throw FormatError("columnar: missing required key '" + key + "'");
    return *m;
  };
  TransitionDataset d;
  d.name = manifest.value("name", base.filename().string());
  d.states = require("observations");
  d.actions = require("actions");
  d.rewards = require("rewards").col(0);
  d.terminals.resize(static_cast<std::size_t>(d.n()));
  {
    Matd t = require("terminals");
    for (Eigen::Index i = 0; i < t.rows(); ++i)
      d.terminals[static_cast<std::size_t>(i)] = t(i, 0) != 0.0;
  }
  if (auto t = get("timeouts")) {
    d.timeouts.resize(static_cast<std::size_t>(t->rows()));
    for (Eigen::Index i = 0; i < t->rows(); ++i)
      d.timeouts[static_cast<std::size_t>(i)] = (*t)(i, 0) != 0.0;
  }
  if (auto nx = get("next_observations"))
    d.next_states = *nx;
  else
    detail::derive_next_states(d);
  d.validate();
  return d;
}

inline bool is_hdf5_path(const std::filesystem::path& p) {
  const auto ext = p.extension().string();
  return ext == ".h5" || ext == ".hdf5";
}

/// Dispatches on path shape: .h5/.hdf5 file vs columnar directory/manifest.
inline TransitionDataset load_dataset(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path))
    throw ArgumentError("dataset path does not exist: " + path.string());
  if (is_hdf5_path(path)) return load_dataset_hdf5(path);
  return load_dataset_columnar(path);
}

inline void save_dataset(const TransitionDataset& d, const std::filesystem::path& path) {
  if (is_hdf5_path(path))
    save_dataset_hdf5(d, path);
  else
    save_dataset_columnar(d, path);
}

}  // namespace tsrl::data

#pragma once

// Interaction-log ingestion, k-core filtering, leave-one-out splitting.
// Item ids are dense 1-based; 0 is reserved for sequence padding. Users keep
// their source labels as keys so manifests stay human-readable.

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "gsrec/core/rng.hpp"

namespace gsrec::data {

struct InteractionLog {
  std::map<std::string, std::vector<int64_t>> users;
  int64_t catalog_size = 0;
  std::vector<std::string> item_labels;  // [0] unused (padding slot)

  int64_t n_users() const { return static_cast<int64_t>(users.size()); }

  int64_t n_interactions() const {
    int64_t n = 0;
    for (const auto& [u, seq] : users) n += static_cast<int64_t>(seq.size());
    return n;
  }

  void validate() const {
    if (item_labels.size() != static_cast<size_t>(catalog_size) + 1)
      throw std::logic_error("item label table does not match catalog size");
    for (const auto& [u, seq] : users) {
      if (seq.empty())
        throw std::logic_error("user " + u + " has an empty sequence");
      for (int64_t id : seq)
        if (id < 1 || id > catalog_size)
          throw std::logic_error("user " + u + " references item id " +
                                 std::to_string(id) + " outside 1.." +
                                 std::to_string(catalog_size));
    }
  }
};

struct DatasetSplit {
  InteractionLog train;
  std::map<std::string, int64_t> test_targets;
  std::vector<std::string> validation_users;
  std::map<std::string, int64_t> validation_targets;
};

enum class LogFormat { Bert4RecTxt, CsvWithTime };

inline LogFormat parse_log_format(const std::string& name) {
  if (name == "bert4rec-txt") return LogFormat::Bert4RecTxt;
  if (name == "csv-with-time") return LogFormat::CsvWithTime;
  throw std::invalid_argument("unknown interaction log format '" + name +
                              "' (expected bert4rec-txt or csv-with-time)");
}

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> fields;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      fields.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur += c;
    }
  }
  fields.push_back(cur);
  return fields;
}

struct RawEvent {
  int64_t item;
  double time;
};

}  // namespace detail

inline InteractionLog load_interactions(const std::string& path,
                                        LogFormat format) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open interaction log: " + path);

  InteractionLog log;
  log.item_labels.push_back("");
  std::unordered_map<std::string, int64_t> item_id;
  // dense ids assigned by first appearance in source row order
  auto intern = [&](const std::string& label) {
    auto [it, inserted] =
        item_id.try_emplace(label, static_cast<int64_t>(item_id.size()) + 1);
    if (inserted) log.item_labels.push_back(label);
    return it->second;
  };
  std::map<std::string, std::vector<detail::RawEvent>> events;

  std::string line;
  int64_t line_no = 0;
  int64_t rows = 0;

  if (format == LogFormat::Bert4RecTxt) {
    while (std::getline(in, line)) {
      ++line_no;
      std::istringstream ls(line);
      std::string user, item, extra;
      if (!(ls >> user)) continue;  // blank line
      if (!(ls >> item) || (ls >> extra))
        throw std::runtime_error(
            path + ": line " + std::to_string(line_no) +
            ": expected 'user item', got '" + line + "'");
      events[user].push_back({intern(item), 0.0});
      ++rows;
    }
  } else {
    if (!std::getline(in, line))
      throw std::runtime_error(path + ": empty file, header row required");
    ++line_no;
    auto header = detail::split_csv_line(line);
    auto column = [&](const std::string& name) {
      auto it = std::find(header.begin(), header.end(), name);
      if (it == header.end())
        throw std::runtime_error(path + ": header is missing column '" +
                                 name + "'");
      return static_cast<size_t>(it - header.begin());
    };
    size_t user_col = column("user");
    size_t item_col = column("item");
    size_t time_col = column("timestamp");
    while (std::getline(in, line)) {
      ++line_no;
      if (line.empty() || line == "\r") continue;
      auto fields = detail::split_csv_line(line);
      if (fields.size() != header.size())
        throw std::runtime_error(
            path + ": line " + std::to_string(line_no) + ": expected " +
            std::to_string(header.size()) + " fields, got " +
            std::to_string(fields.size()));
      double t;
      try {
        size_t used = 0;
        t = std::stod(fields[time_col], &used);
        if (used != fields[time_col].size()) throw std::invalid_argument("");
      } catch (const std::exception&) {
        throw std::runtime_error(path + ": line " + std::to_string(line_no) +
                                 ": bad timestamp '" + fields[time_col] + "'");
      }
      events[fields[user_col]].push_back({intern(fields[item_col]), t});
      ++rows;
    }
  }

  if (rows == 0)
    throw std::runtime_error(path + ": no interactions found");

  for (auto& [user, evs] : events) {
    if (format == LogFormat::CsvWithTime)
      std::stable_sort(evs.begin(), evs.end(),
                       [](const detail::RawEvent& a, const detail::RawEvent& b) {
                         return a.time < b.time;
                       });
    auto& seq = log.users[user];
    seq.reserve(evs.size());
    for (const auto& e : evs) seq.push_back(e.item);
  }
  log.catalog_size = static_cast<int64_t>(item_id.size());
  log.validate();
  return log;
}

inline InteractionLog kcore_filter_users(const InteractionLog& log,
                                         int64_t min_interactions) {
  if (min_interactions < 1)
    throw std::invalid_argument("min_interactions must be >= 1");
  std::vector<bool> survives(static_cast<size_t>(log.catalog_size) + 1, false);
  bool any_user = false;
  for (const auto& [user, seq] : log.users) {
    if (static_cast<int64_t>(seq.size()) < min_interactions) continue;
    any_user = true;
    for (int64_t id : seq) survives[static_cast<size_t>(id)] = true;
  }
  if (!any_user)
    throw std::runtime_error("k-core filter removed every user (min=" +
                             std::to_string(min_interactions) + ")");

  // compact id gaps while keeping relative order, so min=1 is the identity
  InteractionLog out;
  std::vector<int64_t> remap(static_cast<size_t>(log.catalog_size) + 1, 0);
  out.item_labels.push_back("");
  for (int64_t id = 1; id <= log.catalog_size; ++id) {
    if (!survives[static_cast<size_t>(id)]) continue;
    remap[static_cast<size_t>(id)] =
        static_cast<int64_t>(out.item_labels.size());
    out.item_labels.push_back(log.item_labels[static_cast<size_t>(id)]);
  }
  out.catalog_size = static_cast<int64_t>(out.item_labels.size()) - 1;
  for (const auto& [user, seq] : log.users) {
    if (static_cast<int64_t>(seq.size()) < min_interactions) continue;
    auto& dst = out.users[user];
    dst.reserve(seq.size());
    for (int64_t id : seq) dst.push_back(remap[static_cast<size_t>(id)]);
  }
  out.validate();
  return out;
}

inline DatasetSplit leave_one_out_split(const InteractionLog& log,
                                        int64_t n_validation_users,
                                        uint64_t seed) {
  if (n_validation_users < 0)
    throw std::invalid_argument("n_validation_users must be >= 0");

  std::vector<std::string> offenders;
  for (const auto& [user, seq] : log.users)
    if (seq.size() < 2) offenders.push_back(user);
  if (!offenders.empty()) {
    std::string msg = "cannot split: users with fewer than 2 interactions:";
    size_t shown = std::min<size_t>(offenders.size(), 20);
    for (size_t i = 0; i < shown; ++i) msg += " " + offenders[i];
    if (offenders.size() > shown)
      msg += " (and " + std::to_string(offenders.size() - shown) + " more)";
    throw std::runtime_error(msg);
  }

  // users with exactly 2 interactions keep a 1-item training sequence and a
  // test target but are never eligible to also give up a validation target
  std::vector<std::string> eligible;
  for (const auto& [user, seq] : log.users)
    if (seq.size() >= 3) eligible.push_back(user);

  Rng rng = Rng::rooted(seed);
  rng.shuffle(eligible);
  size_t n_val = std::min<size_t>(static_cast<size_t>(n_validation_users),
                                  eligible.size());
  std::vector<std::string> val_users(eligible.begin(),
                                     eligible.begin() + n_val);
  std::sort(val_users.begin(), val_users.end());
  std::set<std::string> val_set(val_users.begin(), val_users.end());

  DatasetSplit split;
  split.validation_users = std::move(val_users);
  split.train.catalog_size = log.catalog_size;
  split.train.item_labels = log.item_labels;
  for (const auto& [user, seq] : log.users) {
    bool in_val = val_set.count(user) > 0;
    size_t held = in_val ? 2 : 1;
    split.test_targets[user] = seq.back();
    if (in_val) split.validation_targets[user] = seq[seq.size() - 2];
    split.train.users[user] =
        std::vector<int64_t>(seq.begin(), seq.end() - held);
  }
  split.train.validate();
  return split;
}

inline nlohmann::json split_manifest(const InteractionLog& log,
                                     const DatasetSplit& split,
                                     uint64_t seed) {
  nlohmann::json j;
  j["users"] = log.n_users();
  j["items"] = log.catalog_size;
  j["interactions"] = log.n_interactions();
  j["train_interactions"] = split.train.n_interactions();
  j["validation_seed"] = seed;
  j["validation_users"] = split.validation_users;
  return j;
}

}  // namespace gsrec::data

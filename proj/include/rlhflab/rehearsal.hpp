#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <numeric>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "rlhflab/env.hpp"
#include "rlhflab/io.hpp"
#include "rlhflab/kmeans.hpp"
#include "rlhflab/policy.hpp"
#include "rlhflab/rng.hpp"
#include "rlhflab/scoremodel.hpp"

namespace rlhflab {

// Unit of rehearsal selection: a query embedding plus the advantage score of
// the response sampled for it. The payload points back at an episode of this
// environment or carries an opaque blob for externally produced records.
struct RehearsalRecord {
  std::int64_t id = 0;
  std::vector<double> embedding;
  double am_score = 0.0;
  std::int64_t episode_id = -1;
  int response_index = -1;
  std::string external_payload;  // raw JSON, empty for in-environment records
};

struct RehearsalSelection {
  std::vector<std::size_t> indices;  // into the input record list
  std::vector<int> clusters;         // aligned cluster ids
};

// Per cluster, the min(k, cluster size) records with the highest advantage
// score; ties break toward the lower id. Concatenated in cluster order.
inline RehearsalSelection select_top_k_indices(
    const std::vector<RehearsalRecord>& records, const Clustering& clustering,
    int k) {
  if (k < 1) throw std::invalid_argument("select_top_k: need k >= 1");
  if (records.size() != clustering.assignments.size()) {
    throw std::invalid_argument("select_top_k: clustering size mismatch");
  }
  const int n_clusters = static_cast<int>(clustering.centroids.size());
  RehearsalSelection out;
  for (int c = 0; c < n_clusters; ++c) {
    std::vector<std::size_t> members;
    for (std::size_t i = 0; i < records.size(); ++i) {
      if (clustering.assignments[i] == c) members.push_back(i);
    }
    std::sort(members.begin(), members.end(), [&](std::size_t a, std::size_t b) {
      if (records[a].am_score != records[b].am_score) {
        return records[a].am_score > records[b].am_score;
      }
      return records[a].id < records[b].id;
    });
    const std::size_t take = std::min<std::size_t>(members.size(), k);
    for (std::size_t i = 0; i < take; ++i) {
      out.indices.push_back(members[i]);
      out.clusters.push_back(c);
    }
  }
  return out;
}

inline std::vector<RehearsalRecord> select_top_k(
    const std::vector<RehearsalRecord>& records, const Clustering& clustering,
    int k) {
  const RehearsalSelection sel = select_top_k_indices(records, clustering, k);
  std::vector<RehearsalRecord> out;
  out.reserve(sel.indices.size());
  for (std::size_t i : sel.indices) out.push_back(records[i]);
  return out;
}

struct RehearsalSet {
  std::vector<RehearsalRecord> records;  // final shuffled order
  std::vector<int> clusters;             // aligned cluster ids
};

// Representative example discovery: embed each prompt with its feature
// vector, sample one response per episode from the given (initial) policy,
// score it with the advantage model, cluster the embeddings, keep the top-k
// per cluster and shuffle.
inline RehearsalSet build_rehearsal_set(const std::vector<Episode>& episodes,
                                        const SoftmaxPolicy& policy,
                                        const ScoreCheckpoint& scorer, int c,
                                        int k, RandomStream& rng,
                                        int max_iters = 100, int restarts = 10) {
  if (scorer.mode != ScoreMode::kAdvantage) {
    throw std::invalid_argument("build_rehearsal_set: scorer must be an advantage model");
  }
  if (episodes.empty()) {
    throw std::invalid_argument("build_rehearsal_set: no episodes");
  }

  std::vector<RehearsalRecord> records;
  std::vector<std::vector<double>> embeddings;
  records.reserve(episodes.size());
  embeddings.reserve(episodes.size());
  for (const Episode& ep : episodes) {
    const std::vector<double> probs = action_probs(policy, ep);
    const int action = static_cast<int>(rng.weighted_index(probs));
    RehearsalRecord rec;
    rec.id = ep.prompt.id;
    rec.embedding = ep.prompt.features;
    rec.am_score = score_response(scorer, ep.prompt, ep.candidates[action]);
    rec.episode_id = ep.prompt.id;
    rec.response_index = action;
    embeddings.push_back(rec.embedding);
    records.push_back(std::move(rec));
  }

  const Clustering clustering = kmeans_cluster(embeddings, c, rng, max_iters, restarts);
  RehearsalSelection sel = select_top_k_indices(records, clustering, k);

  std::vector<std::size_t> order(sel.indices.size());
  std::iota(order.begin(), order.end(), 0);
  rng.shuffle(order);

  RehearsalSet out;
  out.records.reserve(order.size());
  out.clusters.reserve(order.size());
  for (std::size_t i : order) {
    out.records.push_back(records[sel.indices[i]]);
    out.clusters.push_back(sel.clusters[i]);
  }
  return out;
}

// Turns a rehearsal set into teacher-forcing pairs, resolving episode ids
// against the episode list it was built from.
inline std::vector<TeacherPair> rehearsal_teacher_pairs(
    const RehearsalSet& set, const std::vector<Episode>& episodes) {
  std::vector<TeacherPair> pairs;
  pairs.reserve(set.records.size());
  for (const RehearsalRecord& rec : set.records) {
    const auto it = std::find_if(episodes.begin(), episodes.end(), [&](const Episode& e) {
      return e.prompt.id == rec.episode_id;
    });
    if (it == episodes.end()) {
      throw std::runtime_error("rehearsal set references unknown episode " +
                               std::to_string(rec.episode_id));
    }
    pairs.push_back({*it, rec.response_index});
  }
  return pairs;
}

// External records: one JSON object per line with {id, embedding, score}
// and an optional free-form payload. Embedding lengths must agree and ids
// must be unique.
inline std::vector<RehearsalRecord> ingest_external_records(
    const std::filesystem::path& path) {
  const std::vector<std::string> lines = read_lines(path);
  std::vector<RehearsalRecord> records;
  std::set<std::int64_t> seen;
  for (std::size_t i = 0; i < lines.size(); ++i) {
    if (lines[i].empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(lines[i]);
    } catch (const std::exception& e) {
      throw std::runtime_error(path.string() + ": line " + std::to_string(i + 1) +
                               ": invalid JSON: " + e.what());
    }
    RehearsalRecord rec;
    try {
      rec.id = j.at("id").get<std::int64_t>();
      rec.embedding = j.at("embedding").get<std::vector<double>>();
      rec.am_score = j.at("score").get<double>();
    } catch (const std::exception& e) {
      throw std::runtime_error(path.string() + ": line " + std::to_string(i + 1) +
                               ": " + e.what());
    }
    if (j.contains("payload")) rec.external_payload = j.at("payload").dump();
    if (rec.embedding.empty()) {
      throw std::runtime_error(path.string() + ": line " + std::to_string(i + 1) +
                               ": empty embedding");
    }
    if (!records.empty() && rec.embedding.size() != records.front().embedding.size()) {
      throw std::runtime_error(path.string() + ": line " + std::to_string(i + 1) +
                               ": embedding dimension mismatch");
    }
    if (!seen.insert(rec.id).second) {
      throw std::runtime_error(path.string() + ": duplicate record id " +
                               std::to_string(rec.id));
    }
    records.push_back(std::move(rec));
  }
  return records;
}

inline RehearsalSet read_rehearsal_jsonl(const std::filesystem::path& path) {
  RehearsalSet set;
  const std::vector<std::string> lines = read_lines(path);
  for (std::size_t i = 0; i < lines.size(); ++i) {
    if (lines[i].empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(lines[i]);
    } catch (const std::exception& e) {
      throw std::runtime_error(path.string() + ": line " + std::to_string(i + 1) +
                               ": invalid JSON: " + e.what());
    }
    RehearsalRecord rec;
    rec.id = j.at("id").get<std::int64_t>();
    rec.am_score = j.at("am_score").get<double>();
    const auto& payload = j.at("payload");
    if (payload.is_object() && payload.contains("episode")) {
      rec.episode_id = payload.at("episode").get<std::int64_t>();
      rec.response_index = payload.at("response").get<int>();
    } else {
      rec.external_payload = payload.dump();
    }
    set.records.push_back(std::move(rec));
    set.clusters.push_back(j.at("cluster").get<int>());
  }
  return set;
}

inline void write_rehearsal_jsonl(const RehearsalSet& set,
                                  const std::filesystem::path& path) {
  std::ostringstream out;
  for (std::size_t i = 0; i < set.records.size(); ++i) {
    const RehearsalRecord& rec = set.records[i];
    nlohmann::json payload;
    if (!rec.external_payload.empty()) {
      payload = nlohmann::json::parse(rec.external_payload);
    } else {
      payload = {{"episode", rec.episode_id}, {"response", rec.response_index}};
    }
    nlohmann::json j{{"id", rec.id},
                     {"cluster", set.clusters[i]},
                     {"am_score", rec.am_score},
                     {"payload", payload}};
    out << j.dump() << '\n';
  }
  write_text_file(path, out.str());
}

}  // namespace rlhflab

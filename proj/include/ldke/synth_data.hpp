// SPDX-License-Identifier: Apache-2.0
//
// Deterministic fine-grained scene benchmark. Each scene holds 2-4 entities
// (distinct kinds) on a 2x2 grid; each scene yields one edit bundle that
// flips the color of one entity.
//
// Dataset file format (one bundle per line after the header):
//
//   LDKE-DATASET 1 <key>=<value> ...           (resolved generator config)
//   id=<n>\tseed=<u64>\tentities=<e>;<e>...\tedit=<prompt>|<y_o>|<y_e>\t
//     rephrases=<q>;<q>...\tfg_gen=...\tfg_loc=...\tt_loc=...\tport=...
//
// where <e> = kind:color:count:slot (count 1-4, slot 0-3) and <q> =
// <prompt>|<answer>. Fields are tab-separated and appear in exactly this
// order. Prompts are space-separated vocabulary words. t_loc queries are
// text-only (null image); every other query is asked about the scene image.

#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "ldke/tensor.hpp"
#include "ldke/vocab.hpp"

namespace ldke::synth {

inline constexpr int kSlots = 4;
inline constexpr int kMaxCount = 4;

const std::vector<std::string>& kinds();
const std::vector<std::string>& colors();
// fruits()[i] shares the color colors()[i] (the portability relation).
const std::vector<std::string>& fruits();
const std::vector<std::string>& count_words();

Vocabulary make_vocabulary();

// Feature layout per visual token: kind one-hot | color one-hot | count
// one-hot | slot one-hot | null flag.
int visual_feature_dim();

struct Entity {
  int kind = 0;
  int color = 0;
  int count = 1;  // 1..kMaxCount
  int slot = 0;
  bool operator==(const Entity&) const = default;
};

struct Scene {
  int scene_id = 0;
  std::uint64_t seed = 0;
  std::vector<Entity> entities;

  // nullptr when the kind is absent.
  const Entity* find_kind(int kind) const;
  bool operator==(const Scene&) const = default;
};

enum class QueryType { color, count, is_color, fruit, text_fruit, text_color };
inline constexpr int kTemplates = 3;

struct Query {
  QueryType type = QueryType::color;
  int kind = -1;
  int color = -1;  // is_color, text_fruit
  int fruit = -1;  // text_color
  int template_id = 0;
};

bool is_text_only(QueryType t);
std::string render_prompt(const Query& q);
// Ground truth under the given world. Throws DataError if the query names
// a kind absent from the scene.
std::string world_answer(const Scene& scene, const Query& q);

struct QueryItem {
  std::string prompt;
  std::string answer;
  bool operator==(const QueryItem&) const = default;
};

struct EditBundle {
  int id = 0;
  Scene scene;
  std::string edit_prompt;
  std::string old_answer;  // y_o
  std::string new_answer;  // y_e
  std::vector<QueryItem> rephrases;
  std::vector<QueryItem> fg_gen;
  std::vector<QueryItem> fg_loc;
  std::vector<QueryItem> t_loc;
  std::vector<QueryItem> port;
  bool operator==(const EditBundle&) const = default;
};

struct Benchmark {
  Vocabulary vocab;
  std::vector<Scene> scenes;
  std::vector<EditBundle> bundles;
};

Benchmark generate_benchmark(std::uint64_t seed, int n_scenes);

Matrix render_scene(const Scene& scene);
// Image used for text-only queries: every slot carries the null code.
Matrix null_image();

using DatasetHeader = std::vector<std::pair<std::string, std::string>>;

std::string format_dataset(const std::vector<EditBundle>& bundles, const DatasetHeader& header);
std::vector<EditBundle> parse_dataset(const std::string& text, DatasetHeader* header = nullptr);
void write_dataset(const std::filesystem::path& path, const std::vector<EditBundle>& bundles,
                   const DatasetHeader& header = {});
std::vector<EditBundle> read_dataset(const std::filesystem::path& path, DatasetHeader* header = nullptr);

// Pretraining pool: every bundle query with its pre-edit ground truth plus a
// dense sweep of per-entity questions and the text-only lookup facts.
struct PoolQuery {
  int scene_index = -1;  // index into the bundle list; -1 = null image
  std::string prompt;
  std::string answer;
};
std::vector<PoolQuery> pretraining_pool(const std::vector<EditBundle>& bundles, std::uint64_t seed);

}  // namespace ldke::synth

// SPDX-License-Identifier: Apache-2.0

#include "ldke/synth_data.hpp"

#include <algorithm>
#include <set>
#include <sstream>

#include "ldke/container.hpp"
#include "ldke/errors.hpp"
#include "ldke/rng.hpp"

namespace ldke::synth {

namespace {

const std::vector<std::vector<std::string>>& templates_for(QueryType t) {
  static const std::vector<std::vector<std::string>> color = {
      {"what color is the {K}"}, {"which color is the {K}"}, {"name the color of the {K}"}};
  static const std::vector<std::vector<std::string>> count = {
      {"how many {K}"}, {"what is the number of {K}"}, {"count the {K}"}};
  static const std::vector<std::vector<std::string>> is_color = {
      {"is {C} the color of the {K}"}, {"does {C} describe the {K}"}, {"is the color {C} for the {K}"}};
  static const std::vector<std::vector<std::string>> fruit = {{"which fruit shares the color of the {K}"},
                                                              {"what fruit matches the color of the {K}"},
                                                              {"name the fruit colored like the {K}"}};
  static const std::vector<std::vector<std::string>> text_fruit = {
      {"which fruit is {C}"}, {"what fruit has the color {C}"}, {"name a fruit that is {C}"}};
  static const std::vector<std::vector<std::string>> text_color = {
      {"what color is a {F}"}, {"which color is a {F}"}, {"name the color of a {F}"}};
  switch (t) {
    case QueryType::color: return color;
    case QueryType::count: return count;
    case QueryType::is_color: return is_color;
    case QueryType::fruit: return fruit;
    case QueryType::text_fruit: return text_fruit;
    case QueryType::text_color: return text_color;
  }
  return color;
}

constexpr QueryType kAllTypes[] = {QueryType::color,      QueryType::count,     QueryType::is_color,
                                   QueryType::fruit,      QueryType::text_fruit, QueryType::text_color};

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == sep) {
      out.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

int index_of(const std::vector<std::string>& list, const std::string& w, const char* what) {
  auto it = std::find(list.begin(), list.end(), w);
  if (it == list.end()) throw ParseError(std::string("unknown ") + what + " '" + w + "'");
  return static_cast<int>(it - list.begin());
}

Query make_query(QueryType type, int kind, int color, int fruit, int tpl) {
  Query q;
  q.type = type;
  q.kind = kind;
  q.color = color;
  q.fruit = fruit;
  q.template_id = tpl;
  return q;
}

QueryItem item(const Scene& s, const Query& q) { return {render_prompt(q), world_answer(s, q)}; }

Query random_text_query(Rng& rng) {
  const int tpl = rng.uniform_int(0, kTemplates - 1);
  if (rng.uniform_int(0, 1) == 0) {
    return make_query(QueryType::text_fruit, -1, rng.uniform_int(0, static_cast<int>(colors().size()) - 1), -1, tpl);
  }
  return make_query(QueryType::text_color, -1, -1, rng.uniform_int(0, static_cast<int>(fruits().size()) - 1), tpl);
}

}  // namespace

const std::vector<std::string>& kinds() {
  static const std::vector<std::string> v = {"cube", "sphere", "cone",  "cylinder", "ring",  "star",
                                             "pyramid", "disk", "torus", "prism",    "wedge", "arch"};
  return v;
}

const std::vector<std::string>& colors() {
  static const std::vector<std::string> v = {"red",   "green", "blue", "yellow", "purple",
                                             "white", "black", "pink", "brown",  "gray"};
  return v;
}

const std::vector<std::string>& fruits() {
  static const std::vector<std::string> v = {"cherry",  "lime",       "blueberry", "banana", "plum",
                                             "coconut", "blackberry", "peach",     "date",   "fig"};
  return v;
}

const std::vector<std::string>& count_words() {
  static const std::vector<std::string> v = {"one", "two", "three", "four"};
  return v;
}

Vocabulary make_vocabulary() {
  std::vector<std::string> words = {"<pad>", "<eoa>"};
  std::set<std::string> seen(words.begin(), words.end());
  auto push = [&](const std::string& w) {
    if (seen.insert(w).second) words.push_back(w);
  };
  for (QueryType t : kAllTypes) {
    for (const auto& tpl : templates_for(t)) {
      std::istringstream in(tpl[0]);
      std::string w;
      while (in >> w)
        if (w.front() != '{') push(w);
    }
  }
  for (const auto& w : kinds()) push(w);
  for (const auto& w : colors()) push(w);
  for (const auto& w : fruits()) push(w);
  for (const auto& w : count_words()) push(w);
  push("yes");
  push("no");
  return Vocabulary(std::move(words));
}

int visual_feature_dim() {
  return static_cast<int>(kinds().size() + colors().size()) + kMaxCount + kSlots + 1;
}

const Entity* Scene::find_kind(int kind) const {
  for (const auto& e : entities)
    if (e.kind == kind) return &e;
  return nullptr;
}

bool is_text_only(QueryType t) { return t == QueryType::text_fruit || t == QueryType::text_color; }

std::string render_prompt(const Query& q) {
  std::istringstream in(templates_for(q.type).at(q.template_id)[0]);
  std::string out, w;
  while (in >> w) {
    if (!out.empty()) out += ' ';
    if (w == "{K}") {
      out += kinds().at(q.kind);
    } else if (w == "{C}") {
      out += colors().at(q.color);
    } else if (w == "{F}") {
      out += fruits().at(q.fruit);
    } else {
      out += w;
    }
  }
  return out;
}

std::string world_answer(const Scene& scene, const Query& q) {
  switch (q.type) {
    case QueryType::text_fruit: return fruits().at(q.color);
    case QueryType::text_color: return colors().at(q.fruit);
    default: break;
  }
  const Entity* e = scene.find_kind(q.kind);
  if (e == nullptr) throw DataError("query names a kind absent from scene " + std::to_string(scene.scene_id));
  switch (q.type) {
    case QueryType::color: return colors().at(e->color);
    case QueryType::count: return count_words().at(e->count - 1);
    case QueryType::is_color: return e->color == q.color ? "yes" : "no";
    case QueryType::fruit: return fruits().at(e->color);
    default: return {};
  }
}

Benchmark generate_benchmark(std::uint64_t seed, int n_scenes) {
  if (n_scenes < 10) throw UsageError("generate_benchmark: n_scenes must be >= 10");
  Benchmark b;
  b.vocab = make_vocabulary();
  const int n_kinds = static_cast<int>(kinds().size());
  const int n_colors = static_cast<int>(colors().size());
  for (int s = 0; s < n_scenes; ++s) {
    Scene scene;
    scene.scene_id = s;
    scene.seed = derive_seed(seed, "scene:" + std::to_string(s));
    Rng rng(scene.seed);
    const int n_entities = rng.uniform_int(2, kSlots);
    std::vector<int> kind_pool(n_kinds), slot_pool(kSlots);
    for (int i = 0; i < n_kinds; ++i) kind_pool[i] = i;
    for (int i = 0; i < kSlots; ++i) slot_pool[i] = i;
    rng.shuffle(kind_pool.begin(), kind_pool.end());
    rng.shuffle(slot_pool.begin(), slot_pool.end());
    for (int i = 0; i < n_entities; ++i) {
      Entity e;
      e.kind = kind_pool[i];
      e.slot = slot_pool[i];
      e.color = rng.uniform_int(0, n_colors - 1);
      e.count = rng.uniform_int(1, kMaxCount);
      scene.entities.push_back(e);
    }
    std::sort(scene.entities.begin(), scene.entities.end(),
              [](const Entity& a, const Entity& c) { return a.slot < c.slot; });

    EditBundle bundle;
    bundle.id = s;
    bundle.scene = scene;
    const int target = rng.uniform_int(0, n_entities - 1);
    const Entity& te = scene.entities[target];
    int new_color = rng.uniform_int(0, n_colors - 2);
    if (new_color >= te.color) ++new_color;
    Scene edited = scene;
    edited.entities[target].color = new_color;

    const int edit_tpl = rng.uniform_int(0, kTemplates - 1);
    const Query edit_q = make_query(QueryType::color, te.kind, -1, -1, edit_tpl);
    bundle.edit_prompt = render_prompt(edit_q);
    bundle.old_answer = world_answer(scene, edit_q);
    bundle.new_answer = world_answer(edited, edit_q);
    for (int t = 0; t < kTemplates; ++t)
      if (t != edit_tpl) bundle.rephrases.push_back(item(edited, make_query(QueryType::color, te.kind, -1, -1, t)));

    bundle.fg_gen.push_back(
        item(edited, make_query(QueryType::is_color, te.kind, new_color, -1, rng.uniform_int(0, kTemplates - 1))));
    bundle.fg_gen.push_back(
        item(edited, make_query(QueryType::is_color, te.kind, te.color, -1, rng.uniform_int(0, kTemplates - 1))));

    int other1 = rng.uniform_int(0, n_entities - 2);
    if (other1 >= target) ++other1;
    int other2 = rng.uniform_int(0, n_entities - 2);
    if (other2 >= target) ++other2;
    const int k1 = scene.entities[other1].kind, k2 = scene.entities[other2].kind;
    bundle.fg_loc.push_back(item(edited, make_query(QueryType::color, k1, -1, -1, rng.uniform_int(0, kTemplates - 1))));
    bundle.fg_loc.push_back(
        item(edited, make_query(QueryType::count, te.kind, -1, -1, rng.uniform_int(0, kTemplates - 1))));
    bundle.fg_loc.push_back(item(edited, make_query(QueryType::count, k2, -1, -1, rng.uniform_int(0, kTemplates - 1))));

    for (int i = 0; i < 2; ++i) bundle.t_loc.push_back(item(edited, random_text_query(rng)));
    bundle.port.push_back(
        item(edited, make_query(QueryType::fruit, te.kind, -1, -1, rng.uniform_int(0, kTemplates - 1))));

    b.scenes.push_back(scene);
    b.bundles.push_back(std::move(bundle));
  }
  return b;
}

Matrix render_scene(const Scene& scene) {
  const int nk = static_cast<int>(kinds().size());
  const int nc = static_cast<int>(colors().size());
  Matrix img = null_image();
  for (const auto& e : scene.entities) {
    auto row = img.row(e.slot);
    std::fill(row.begin(), row.end(), 0.0);
    row[e.kind] = 1.0;
    row[nk + e.color] = 1.0;
    row[nk + nc + e.count - 1] = 1.0;
    row[nk + nc + kMaxCount + e.slot] = 1.0;
  }
  return img;
}

Matrix null_image() {
  const int nk = static_cast<int>(kinds().size());
  const int nc = static_cast<int>(colors().size());
  Matrix img(kSlots, visual_feature_dim());
  for (int s = 0; s < kSlots; ++s) {
    img(s, nk + nc + kMaxCount + s) = 1.0;
    img(s, visual_feature_dim() - 1) = 1.0;
  }
  return img;
}

// ----------------------------------------------------------------------------
// Dataset file

namespace {

constexpr const char* kDatasetMagic = "LDKE-DATASET 1";
constexpr const char* kFieldOrder[] = {"id",      "seed",   "entities", "edit", "rephrases",
                                       "fg_gen",  "fg_loc", "t_loc",    "port"};

std::string format_items(const std::vector<QueryItem>& items) {
  std::string out;
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (i) out += ';';
    out += items[i].prompt + '|' + items[i].answer;
  }
  return out;
}

std::vector<QueryItem> parse_items(const std::string& field, int line_no) {
  std::vector<QueryItem> out;
  if (field.empty()) return out;
  for (const auto& part : split(field, ';')) {
    const auto kv = split(part, '|');
    if (kv.size() != 2 || kv[0].empty() || kv[1].empty()) {
      throw ParseError("dataset line " + std::to_string(line_no) + ": malformed query '" + part + "'");
    }
    out.push_back({kv[0], kv[1]});
  }
  return out;
}

}  // namespace

std::string format_dataset(const std::vector<EditBundle>& bundles, const DatasetHeader& header) {
  std::ostringstream out;
  out << kDatasetMagic;
  for (const auto& [k, v] : header) out << ' ' << k << '=' << v;
  out << '\n';
  for (const auto& b : bundles) {
    out << "id=" << b.id << "\tseed=" << b.scene.seed << "\tentities=";
    for (std::size_t i = 0; i < b.scene.entities.size(); ++i) {
      const auto& e = b.scene.entities[i];
      if (i) out << ';';
      out << kinds()[e.kind] << ':' << colors()[e.color] << ':' << e.count << ':' << e.slot;
    }
    out << "\tedit=" << b.edit_prompt << '|' << b.old_answer << '|' << b.new_answer;
    out << "\trephrases=" << format_items(b.rephrases);
    out << "\tfg_gen=" << format_items(b.fg_gen);
    out << "\tfg_loc=" << format_items(b.fg_loc);
    out << "\tt_loc=" << format_items(b.t_loc);
    out << "\tport=" << format_items(b.port);
    out << '\n';
  }
  return out.str();
}

std::vector<EditBundle> parse_dataset(const std::string& text, DatasetHeader* header) {
  std::vector<EditBundle> bundles;
  std::size_t pos = 0;
  int line_no = 0;
  bool saw_header = false;
  while (pos < text.size()) {
    const std::size_t nl = text.find('\n', pos);
    ++line_no;
    if (nl == std::string::npos) {
      throw ParseError("dataset line " + std::to_string(line_no) + ": truncated record (no terminating newline)");
    }
    const std::string line = text.substr(pos, nl - pos);
    pos = nl + 1;
    if (!saw_header) {
      if (line.rfind(kDatasetMagic, 0) != 0) throw ParseError("dataset line 1: bad header");
      if (header) {
        header->clear();
        std::istringstream in(line.substr(std::string(kDatasetMagic).size()));
        std::string tok;
        while (in >> tok) {
          const auto eq = tok.find('=');
          if (eq == std::string::npos) throw ParseError("dataset line 1: malformed header entry '" + tok + "'");
          header->emplace_back(tok.substr(0, eq), tok.substr(eq + 1));
        }
      }
      saw_header = true;
      continue;
    }
    const auto fields = split(line, '\t');
    constexpr std::size_t n_fields = std::size(kFieldOrder);
    if (fields.size() != n_fields) {
      throw ParseError("dataset line " + std::to_string(line_no) + ": expected " + std::to_string(n_fields) +
                       " fields, got " + std::to_string(fields.size()));
    }
    std::vector<std::string> values;
    for (std::size_t i = 0; i < n_fields; ++i) {
      const std::string prefix = std::string(kFieldOrder[i]) + "=";
      if (fields[i].rfind(prefix, 0) != 0) {
        throw ParseError("dataset line " + std::to_string(line_no) + ": expected field '" + kFieldOrder[i] + "'");
      }
      values.push_back(fields[i].substr(prefix.size()));
    }
    EditBundle b;
    try {
      b.id = std::stoi(values[0]);
      b.scene.scene_id = b.id;
      b.scene.seed = std::stoull(values[1]);
      for (const auto& part : split(values[2], ';')) {
        const auto f = split(part, ':');
        if (f.size() != 4) throw ParseError("malformed entity '" + part + "'");
        Entity e;
        e.kind = index_of(kinds(), f[0], "kind");
        e.color = index_of(colors(), f[1], "color");
        e.count = std::stoi(f[2]);
        e.slot = std::stoi(f[3]);
        if (e.count < 1 || e.count > kMaxCount || e.slot < 0 || e.slot >= kSlots) {
          throw ParseError("entity out of range '" + part + "'");
        }
        b.scene.entities.push_back(e);
      }
      const auto edit = split(values[3], '|');
      if (edit.size() != 3) throw ParseError("malformed edit field");
      b.edit_prompt = edit[0];
      b.old_answer = edit[1];
      b.new_answer = edit[2];
    } catch (const ParseError& e) {
      throw ParseError("dataset line " + std::to_string(line_no) + ": " + e.what());
    } catch (const std::logic_error&) {
      throw ParseError("dataset line " + std::to_string(line_no) + ": malformed number");
    }
    b.rephrases = parse_items(values[4], line_no);
    b.fg_gen = parse_items(values[5], line_no);
    b.fg_loc = parse_items(values[6], line_no);
    b.t_loc = parse_items(values[7], line_no);
    b.port = parse_items(values[8], line_no);
    bundles.push_back(std::move(b));
  }
  if (!saw_header) throw ParseError("dataset line 1: empty file");
  return bundles;
}

void write_dataset(const std::filesystem::path& path, const std::vector<EditBundle>& bundles,
                   const DatasetHeader& header) {
  write_file_atomic(path, format_dataset(bundles, header));
}

std::vector<EditBundle> read_dataset(const std::filesystem::path& path, DatasetHeader* header) {
  const std::string text = read_file(path);
  try {
    return parse_dataset(text, header);
  } catch (const ParseError& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
}

// ----------------------------------------------------------------------------
// Pretraining pool

std::vector<PoolQuery> pretraining_pool(const std::vector<EditBundle>& bundles, std::uint64_t seed) {
  std::vector<PoolQuery> pool;
  std::set<std::pair<int, std::string>> seen;
  auto add = [&](int scene_index, const std::string& prompt, const std::string& answer) {
    if (seen.emplace(scene_index, prompt).second) pool.push_back({scene_index, prompt, answer});
  };
  const int n_colors = static_cast<int>(colors().size());
  for (std::size_t bi = 0; bi < bundles.size(); ++bi) {
    const auto& b = bundles[bi];
    const int si = static_cast<int>(bi);
    const Scene& scene = b.scene;
    Rng rng(derive_seed(seed, "pool:" + std::to_string(b.id)));
    // Bundle queries carry post-edit answers; pretraining needs the
    // pre-edit ground truth, so every grounded prompt is re-answered from
    // the original scene.
    add(si, b.edit_prompt, b.old_answer);
    for (const auto& e : scene.entities) {
      for (int t = 0; t < kTemplates; ++t) {
        for (QueryType type : {QueryType::color, QueryType::count, QueryType::fruit}) {
          const Query q = make_query(type, e.kind, -1, -1, t);
          add(si, render_prompt(q), world_answer(scene, q));
        }
        const Query yes_q = make_query(QueryType::is_color, e.kind, e.color, -1, t);
        add(si, render_prompt(yes_q), world_answer(scene, yes_q));
        int other = rng.uniform_int(0, n_colors - 2);
        if (other >= e.color) ++other;
        const Query no_q = make_query(QueryType::is_color, e.kind, other, -1, t);
        add(si, render_prompt(no_q), world_answer(scene, no_q));
      }
    }
    for (const auto& q : b.fg_gen) {
      // fg_gen answers are post-edit; the pre-edit answer is the opposite.
      add(si, q.prompt, q.answer == "yes" ? "no" : "yes");
    }
  }
  for (int c = 0; c < n_colors; ++c) {
    for (int t = 0; t < kTemplates; ++t) {
      const Query a = make_query(QueryType::text_fruit, -1, c, -1, t);
      add(-1, render_prompt(a), world_answer({}, a));
      const Query b = make_query(QueryType::text_color, -1, -1, c, t);
      add(-1, render_prompt(b), world_answer({}, b));
    }
  }
  return pool;
}

}  // namespace ldke::synth

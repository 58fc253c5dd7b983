#include "perturbkit/dataset.hpp"

#include <json.hpp>
#include <sstream>

#include "perturbkit/common.hpp"

namespace perturbkit {

using nlohmann::json;

std::vector<std::string> LabeledExampleSet::class_labels() const {
  std::vector<std::string> out;
  out.reserve(items.size());
  for (auto& it : items) out.push_back(it.class_label);
  return out;
}

std::vector<std::string> LabeledExampleSet::distinct_labels() const {
  std::vector<std::string> out;
  for (auto& it : items)
    if (std::find(out.begin(), out.end(), it.class_label) == out.end())
      out.push_back(it.class_label);
  return out;
}

LabeledExampleSet relabel_by_factor(const LabeledExampleSet& set,
                                    const std::string& factor) {
  LabeledExampleSet out = set;
  for (auto& item : out.items) {
    auto level = item.factors.find(factor);
    if (level == item.factors.end()) {
      throw ConfigError("item '" + item.remapping.id + "' lacks factor '" +
                        factor + "'");
    }
    item.class_label = level->second;
  }
  return out;
}

namespace {

json span_json(const std::optional<Span>& s) {
  if (!s) return nullptr;
  return json::array({s->start, s->end});
}

std::optional<Span> span_from_json(const json& j, const std::string& field) {
  if (j.is_null()) return std::nullopt;
  if (!j.is_array() || j.size() != 2 || !j[0].is_number_integer() ||
      !j[1].is_number_integer())
    throw ParseError(field + " must be null or [start, end]");
  return Span{j[0].get<int>(), j[1].get<int>()};
}

}  // namespace

std::string serialize_set(const LabeledExampleSet& set) {
  std::ostringstream out;
  json header = {{"format", "remapping-set"}, {"version", 1},
                 {"dataset_id", set.dataset_id}};
  out << header.dump() << "\n";
  for (auto& item : set.items) {
    RemappingRecord r = to_record(item.remapping);
    json rec = {{"id", r.id},
                {"class", item.class_label},
                {"original_text", r.original_text},
                {"alternate_text", r.alternate_text},
                {"region_original_span", span_json(r.region_original_span)},
                {"region_alternate_span", span_json(r.region_alternate_span)},
                {"factors", json(item.factors)}};
    if (r.deletion) rec["deletion"] = true;
    if (item.first_subword_only) rec["first_subword_only"] = true;
    out << rec.dump() << "\n";
  }
  return out.str();
}

LabeledExampleSet deserialize_set(const std::string& stream) {
  LabeledExampleSet set;
  std::istringstream in(stream);
  std::string line;
  int line_no = 0;
  bool saw_header = false;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error& e) {
      throw ParseError("line " + std::to_string(line_no) + ": " + e.what());
    }
    try {
      if (!saw_header) {
        if (!j.is_object() || j.value("format", "") != "remapping-set")
          throw std::runtime_error("missing remapping-set header");
        set.dataset_id = j.value("dataset_id", "");
        saw_header = true;
        continue;
      }
      RemappingRecord r;
      r.id = j.at("id").get<std::string>();
      r.class_label = j.value("class", "");
      r.original_text = j.at("original_text").get<std::string>();
      r.alternate_text = j.at("alternate_text").get<std::string>();
      r.region_original_span = span_from_json(j.at("region_original_span"),
                                              "region_original_span");
      r.region_alternate_span = span_from_json(j.at("region_alternate_span"),
                                               "region_alternate_span");
      r.deletion = j.value("deletion", false);
      r.first_subword_only = j.value("first_subword_only", false);
      LabeledExample item;
      item.remapping = parse_remapping(r);
      item.class_label = r.class_label;
      item.first_subword_only = r.first_subword_only;
      if (j.contains("factors"))
        item.factors = j.at("factors").get<std::map<std::string, std::string>>();
      set.items.push_back(std::move(item));
    } catch (const std::exception& e) {
      throw ParseError("line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  if (!saw_header) throw ParseError("line 1: missing remapping-set header");
  return set;
}

void save_set(const LabeledExampleSet& set, const std::string& path) {
  write_text_file_atomic(path, serialize_set(set));
}

LabeledExampleSet load_set(const std::string& path) {
  try {
    return deserialize_set(read_text_file(path));
  } catch (const ParseError& e) {
    throw ParseError(path + ": " + e.what());
  }
}

}  // namespace perturbkit

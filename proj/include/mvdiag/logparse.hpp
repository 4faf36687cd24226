#pragma once

// Fixed-depth prefix-tree log template miner (Drain). Messages are masked,
// split on whitespace, routed by token count and leading tokens to a leaf,
// and merged into the most similar template at that leaf.

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <regex>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "mvdiag/common.hpp"

namespace mvdiag {

using json = nlohmann::json;

inline constexpr std::string_view kWildcard = "<*>";

struct MaskRule {
  std::string pattern;
  std::string placeholder = std::string(kWildcard);
  // Skip the rule on messages without any digit (all default rules qualify).
  bool requires_digit = false;
};

inline std::vector<MaskRule> default_mask_rules() {
  return {
      {R"([0-9a-fA-F]{8}-[0-9a-fA-F]{4}-[0-9a-fA-F]{4}-[0-9a-fA-F]{4}-[0-9a-fA-F]{12})", std::string(kWildcard), true},
      {R"(\b\d{1,3}(?:\.\d{1,3}){3}(?::\d+)?\b)", std::string(kWildcard), true},
      {R"(\b0[xX][0-9a-fA-F]+\b)", std::string(kWildcard), true},
      {R"(\b(?=[0-9a-fA-F]*[0-9])[0-9a-fA-F]{4,}\b)", std::string(kWildcard), true},
      {R"(\b\d+(?:\.\d+)?\b)", std::string(kWildcard), true},
  };
}

struct DrainConfig {
  int tree_depth = 4;
  double similarity_threshold = 0.4;
  int max_children = 100;
  std::vector<MaskRule> mask_rules = default_mask_rules();
};

struct LogTemplate {
  int id = 0;
  std::vector<std::string> tokens;
  std::int64_t match_count = 0;

  std::string text() const {
    std::string out;
    for (std::size_t i = 0; i < tokens.size(); ++i) {
      if (i > 0) out += ' ';
      out += tokens[i];
    }
    return out;
  }
};

class DrainParser {
 public:
  explicit DrainParser(DrainConfig config = {}) : config_(std::move(config)) {
    if (config_.tree_depth < 3) throw Error(ErrorCode::InvalidConfig, "drain tree_depth must be >= 3");
    if (!(config_.similarity_threshold > 0.0 && config_.similarity_threshold <= 1.0))
      throw Error(ErrorCode::InvalidConfig, "drain similarity_threshold must be in (0,1]");
    if (config_.max_children < 2) throw Error(ErrorCode::InvalidConfig, "drain max_children must be >= 2");
    compile_masks();
    nodes_.emplace_back();  // root
  }

  const DrainConfig& config() const { return config_; }

  /// Masked, whitespace-split form of a message.
  std::vector<std::string> tokenize(std::string_view message) const {
    std::string masked(message);
    bool has_digit = std::any_of(masked.begin(), masked.end(), [](unsigned char c) { return std::isdigit(c); });
    for (std::size_t i = 0; i < masks_.size(); ++i) {
      if (config_.mask_rules[i].requires_digit && !has_digit) continue;
      masked = std::regex_replace(masked, masks_[i], config_.mask_rules[i].placeholder);
    }
    std::vector<std::string> tokens;
    std::istringstream stream(masked);
    std::string token;
    while (stream >> token) tokens.push_back(token);
    return tokens;
  }

  /// Template id for `message`, creating or generalizing a template as needed.
  int parse(std::string_view message) {
    auto tokens = tokenize(message);
    ++parsed_;
    if (auto hit = search(tokens)) {
      auto& tmpl = templates_[static_cast<std::size_t>(*hit)];
      for (std::size_t i = 0; i < tokens.size(); ++i) {
        if (tmpl.tokens[i] != tokens[i]) tmpl.tokens[i] = std::string(kWildcard);
      }
      ++tmpl.match_count;
      return tmpl.id;
    }
    int id = static_cast<int>(templates_.size());
    templates_.push_back({id, tokens, 1});
    paths_.push_back(insert(id, tokens));
    return id;
  }

  /// Read-only lookup: the template `parse` would assign, or nullopt when a
  /// new template would be created. Safe for concurrent readers.
  std::optional<int> match(std::string_view message) const { return search(tokenize(message)); }

  const std::vector<LogTemplate>& templates() const { return templates_; }
  std::int64_t parsed_count() const { return parsed_; }

  std::map<int, std::int64_t> frequency_table() const {
    if (parsed_ == 0) throw Error(ErrorCode::EmptyState, "no messages parsed");
    std::map<int, std::int64_t> table;
    for (const auto& t : templates_) table[t.id] = t.match_count;
    return table;
  }

  /// Template store: [{"id","template","count","path"}]. `path` is the prefix
  /// tree route so that a restored parser routes identically.
  json to_json() const {
    json out = json::array();
    for (std::size_t i = 0; i < templates_.size(); ++i) {
      out.push_back({{"id", templates_[i].id},
                     {"template", templates_[i].text()},
                     {"count", templates_[i].match_count},
                     {"path", paths_[i]}});
    }
    return out;
  }

  static DrainParser from_json(const json& store, DrainConfig config = {}) {
    DrainParser parser(std::move(config));
    for (const auto& entry : store) {
      LogTemplate tmpl;
      tmpl.id = entry.at("id").get<int>();
      if (tmpl.id != static_cast<int>(parser.templates_.size()))
        throw Error(ErrorCode::MalformedRecord, "template ids must be dense and ordered");
      std::istringstream stream(entry.at("template").get<std::string>());
      std::string token;
      while (stream >> token) tmpl.tokens.push_back(token);
      tmpl.match_count = entry.at("count").get<std::int64_t>();
      parser.parsed_ += tmpl.match_count;
      std::vector<std::string> path;
      if (entry.contains("path")) {
        path = entry.at("path").get<std::vector<std::string>>();
      } else {
        path = parser.route_for_new(tmpl.tokens);
      }
      parser.attach(tmpl.id, path);
      parser.templates_.push_back(std::move(tmpl));
      parser.paths_.push_back(std::move(path));
    }
    return parser;
  }

 private:
  struct Node {
    std::map<std::string, int> children;
    std::vector<int> clusters;
  };

  static bool has_digit(const std::string& token) {
    return std::any_of(token.begin(), token.end(), [](unsigned char c) { return std::isdigit(c); });
  }

  void compile_masks() {
    masks_.clear();
    for (const auto& rule : config_.mask_rules) {
      try {
        masks_.emplace_back(rule.pattern, std::regex::ECMAScript | std::regex::optimize);
      } catch (const std::regex_error& e) {
        throw Error(ErrorCode::InvalidConfig, "bad mask pattern '" + rule.pattern + "': " + e.what());
      }
    }
  }

  std::size_t prefix_levels(std::size_t token_count) const {
    return std::min<std::size_t>(static_cast<std::size_t>(config_.tree_depth - 2), token_count);
  }

  std::optional<int> search(const std::vector<std::string>& tokens) const {
    const Node* node = &nodes_[0];
    auto length_key = std::to_string(tokens.size());
    auto it = node->children.find(length_key);
    if (it == node->children.end()) return std::nullopt;
    node = &nodes_[static_cast<std::size_t>(it->second)];
    for (std::size_t depth = 0; depth < prefix_levels(tokens.size()); ++depth) {
      auto child = node->children.find(tokens[depth]);
      if (child == node->children.end()) child = node->children.find(std::string(kWildcard));
      if (child == node->children.end()) return std::nullopt;
      node = &nodes_[static_cast<std::size_t>(child->second)];
    }
    return best_cluster(node->clusters, tokens);
  }

  std::optional<int> best_cluster(const std::vector<int>& clusters, const std::vector<std::string>& tokens) const {
    std::optional<int> best;
    double best_sim = -1.0;
    int best_params = -1;
    for (int id : clusters) {
      const auto& tmpl = templates_[static_cast<std::size_t>(id)];
      if (tmpl.tokens.size() != tokens.size()) continue;
      int same = 0;
      int params = 0;
      for (std::size_t i = 0; i < tokens.size(); ++i) {
        if (tmpl.tokens[i] == kWildcard) {
          ++params;
          ++same;
        } else if (tmpl.tokens[i] == tokens[i]) {
          ++same;
        }
      }
      double sim = tokens.empty() ? 1.0 : static_cast<double>(same) / static_cast<double>(tokens.size());
      if (sim > best_sim || (sim == best_sim && params > best_params)) {
        best_sim = sim;
        best_params = params;
        best = id;
      }
    }
    if (best && best_sim >= config_.similarity_threshold) return best;
    return std::nullopt;
  }

  // Route a new template would take through the tree, creating no nodes.
  std::vector<std::string> route_for_new(const std::vector<std::string>& tokens) const {
    std::vector<std::string> path{std::to_string(tokens.size())};
    const Node* node = nullptr;
    {
      auto it = nodes_[0].children.find(path[0]);
      node = it == nodes_[0].children.end() ? nullptr : &nodes_[static_cast<std::size_t>(it->second)];
    }
    for (std::size_t depth = 0; depth < prefix_levels(tokens.size()); ++depth) {
      const auto& token = tokens[depth];
      std::string key;
      if (node != nullptr && node->children.count(token)) {
        key = token;
      } else if (has_digit(token)) {
        key = std::string(kWildcard);
      } else if (node == nullptr) {
        key = token;
      } else {
        auto size = static_cast<int>(node->children.size());
        bool has_wild = node->children.count(std::string(kWildcard)) > 0;
        if (has_wild) {
          key = size < config_.max_children ? token : std::string(kWildcard);
        } else {
          key = size + 1 < config_.max_children ? token : std::string(kWildcard);
        }
      }
      path.push_back(key);
      if (node != nullptr) {
        auto it = node->children.find(key);
        node = it == node->children.end() ? nullptr : &nodes_[static_cast<std::size_t>(it->second)];
      }
    }
    return path;
  }

  void attach(int id, const std::vector<std::string>& path) {
    std::size_t node = 0;
    for (const auto& key : path) {
      auto it = nodes_[node].children.find(key);
      if (it == nodes_[node].children.end()) {
        nodes_.emplace_back();
        int fresh = static_cast<int>(nodes_.size() - 1);
        nodes_[node].children.emplace(key, fresh);
        node = static_cast<std::size_t>(fresh);
      } else {
        node = static_cast<std::size_t>(it->second);
      }
    }
    nodes_[node].clusters.push_back(id);
  }

  std::vector<std::string> insert(int id, const std::vector<std::string>& tokens) {
    auto path = route_for_new(tokens);
    attach(id, path);
    return path;
  }

  DrainConfig config_;
  std::vector<std::regex> masks_;
  std::vector<Node> nodes_;
  std::vector<LogTemplate> templates_;
  std::vector<std::vector<std::string>> paths_;
  std::int64_t parsed_ = 0;
};

}  // namespace mvdiag

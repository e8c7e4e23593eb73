#include <map>

#include "structret/structparse.hpp"

namespace structret {

namespace {

LanguageSpec python_spec() {
  LanguageSpec s;
  s.name = "python";
  s.keywords = {"False", "None",   "True",    "and",      "as",     "assert", "async",
                "await", "break",  "class",   "continue", "def",    "del",    "elif",
                "else",  "except", "finally", "for",      "from",   "global", "if",
                "import", "in",    "is",      "lambda",   "nonlocal", "not",  "or",
                "pass",  "raise",  "return",  "try",      "while",  "with",   "yield"};
  s.line_comments = {"#"};
  s.triple_quotes = true;
  s.string_prefixes = {"r", "b", "u", "f", "rb", "br", "fr", "rf"};
  s.operator_chars = "+-*/%@&|^~<>=!.,:;()[]{}\\";
  return s;
}

LanguageSpec go_spec() {
  LanguageSpec s;
  s.name = "go";
  s.keywords = {"break",   "case",   "chan",   "const",       "continue", "default", "defer",
                "else",    "fallthrough", "for", "func",        "go",       "goto",    "if",
                "import",  "interface", "map",   "package",     "range",    "return",  "select",
                "struct",  "switch", "type",   "var",         "true",     "false",   "nil",
                "iota"};
  s.line_comments = {"//"};
  s.block_comments = {{"/*", "*/"}};
  s.quote_chars = "\"'`";
  s.raw_quote_chars = "`";
  s.operator_chars = "+-*/%&|^<>=!:.,;()[]{}~\\";
  return s;
}

LanguageSpec java_spec() {
  LanguageSpec s;
  s.name = "java";
  s.keywords = {"abstract", "assert",     "boolean",   "break",      "byte",     "case",
                "catch",    "char",       "class",     "const",      "continue", "default",
                "do",       "double",     "else",      "enum",       "extends",  "final",
                "finally",  "float",      "for",       "goto",       "if",       "implements",
                "import",   "instanceof", "int",       "interface",  "long",     "native",
                "new",      "package",    "private",   "protected",  "public",   "return",
                "short",    "static",     "strictfp",  "super",      "switch",   "synchronized",
                "this",     "throw",      "throws",    "transient",  "try",      "void",
                "volatile", "while",      "true",      "false",      "null",     "var",
                "record",   "yield"};
  s.line_comments = {"//"};
  s.block_comments = {{"/*", "*/"}};
  s.extra_ident_start = "$";
  s.extra_ident_continue = "$";
  s.operator_chars = "+-*/%&|^<>=!?:.,;()[]{}~@\\";
  return s;
}

LanguageSpec javascript_spec() {
  LanguageSpec s;
  s.name = "javascript";
  s.keywords = {"break",  "case",      "catch",  "class",  "const",  "continue", "debugger",
                "default", "delete",   "do",     "else",   "export", "extends",  "finally",
                "for",    "function",  "if",     "import", "in",     "instanceof", "new",
                "return", "super",     "switch", "this",   "throw",  "try",      "typeof",
                "var",    "void",      "while",  "with",   "yield",  "let",      "static",
                "async",  "await",     "of",     "true",   "false",  "null",     "undefined"};
  s.line_comments = {"//"};
  s.block_comments = {{"/*", "*/"}};
  s.quote_chars = "\"'`";
  s.extra_ident_start = "$";
  s.extra_ident_continue = "$";
  s.operator_chars = "+-*/%&|^<>=!?:.,;()[]{}~@#\\";
  return s;
}

LanguageSpec php_spec() {
  LanguageSpec s;
  s.name = "php";
  s.keywords = {"abstract",  "and",        "array",      "as",         "break",     "callable",
                "case",      "catch",      "class",      "clone",      "const",     "continue",
                "declare",   "default",    "do",         "echo",       "else",      "elseif",
                "empty",     "enddeclare", "endfor",     "endforeach", "endif",     "endswitch",
                "endwhile",  "eval",       "exit",       "extends",    "final",     "finally",
                "fn",        "for",        "foreach",    "function",   "global",    "goto",
                "if",        "implements", "include",    "include_once", "instanceof", "insteadof",
                "interface", "isset",      "list",       "match",      "namespace", "new",
                "or",        "print",      "private",    "protected",  "public",    "readonly",
                "require",   "require_once", "return",   "static",     "switch",    "throw",
                "trait",     "try",        "unset",      "use",        "var",       "while",
                "xor",       "yield",      "true",       "false",      "null",      "self",
                "parent",    "TRUE",       "FALSE",      "NULL",       "php"};
  s.line_comments = {"//", "#"};
  s.block_comments = {{"/*", "*/"}};
  s.quote_chars = "\"'`";
  s.extra_ident_start = "$";
  s.operator_chars = "+-*/%&|^<>=!?:.,;()[]{}~@\\";
  return s;
}

LanguageSpec ruby_spec() {
  LanguageSpec s;
  s.name = "ruby";
  s.keywords = {"BEGIN",  "END",    "alias",  "and",    "begin",  "break",    "case",
                "class",  "def",    "defined?", "do",   "else",   "elsif",    "end",
                "ensure", "false",  "for",    "if",     "in",     "module",   "next",
                "nil",    "not",    "or",     "redo",   "rescue", "retry",    "return",
                "self",   "super",  "then",   "true",   "undef",  "unless",   "until",
                "when",   "while",  "yield",  "__FILE__", "__LINE__", "__method__"};
  s.line_comments = {"#"};
  s.block_comments = {{"=begin", "=end"}};
  s.quote_chars = "\"'`";
  s.extra_ident_start = "@$";
  s.extra_ident_continue = "@";
  s.ident_suffix = "?!";
  s.operator_chars = "+-*/%&|^<>=!?:.,;()[]{}~\\";
  return s;
}

const std::map<std::string, LanguageSpec>& registry() {
  static const std::map<std::string, LanguageSpec> table = [] {
    std::map<std::string, LanguageSpec> m;
    for (auto spec : {python_spec(), go_spec(), java_spec(), javascript_spec(), php_spec(), ruby_spec()}) {
      m.emplace(spec.name, std::move(spec));
    }
    return m;
  }();
  return table;
}

}  // namespace

const LanguageSpec& language_spec(const std::string& lang_tag) {
  const auto& table = registry();
  auto it = table.find(lang_tag);
  if (it == table.end()) throw ValidationError("unsupported code language: " + lang_tag);
  return it->second;
}

std::vector<std::string> supported_languages() {
  std::vector<std::string> out;
  for (const auto& [name, spec] : registry()) out.push_back(name);
  return out;
}

}  // namespace structret

#include <doctest.h>

#include "nahtm/text.h"

using namespace nahtm::text;

TEST_CASE("sentence splitting") {
  const auto s = split_sentences("Hello world. How are you?  Fine!Thanks.  ");
  REQUIRE(s.size() == 3);
  CHECK(s[0] == "Hello world.");
  CHECK(s[1] == "How are you?");
  CHECK(s[2] == "Fine!Thanks.");
  CHECK(split_sentences("   ").empty());
  CHECK(split_sentences("no terminator").size() == 1);
  CHECK(split_sentences("Pi is 3.14 roughly. Yes.").size() == 2);
}

TEST_CASE("tokenization lowercases alphanumeric runs") {
  const auto t = tokenize("The U.S. GDP grew 3% in Q4, didn't it?");
  const std::vector<std::string> expect = {"the", "u", "s", "gdp", "grew", "3", "in", "q4", "didn", "t", "it"};
  CHECK(t == expect);
  CHECK(tokenize("caf\xc3\xa9 ok") == std::vector<std::string>{"caf", "ok"});
}

TEST_CASE("stemming rules") {
  CHECK(stem("classes") == "class");
  CHECK(stem("ponies") == "pony");
  CHECK(stem("running") == "runn");
  CHECK(stem("jumped") == "jump");
  CHECK(stem("agreed") == "agreed");
  CHECK(stem("cats") == "cat");
  CHECK(stem("glass") == "glass");
  CHECK(stem("bus") == "bus");
  CHECK(stem("this") == "this");
  CHECK(stem("sing") == "sing");
  CHECK(stem("is") == "is");
}

TEST_CASE("stopword list") {
  const auto& sw = english_stopwords();
  CHECK(sw.count("the") == 1);
  CHECK(sw.count("ourselves") == 1);
  CHECK(sw.count("market") == 0);
}

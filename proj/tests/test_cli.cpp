// Copyright 2026 The PrivateXR Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     https://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include <gtest/gtest.h>

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <sys/wait.h>

#include "json_schema.hpp"

namespace {

struct Run {
  int code;
  std::string out;
};

Run cli(const std::string& args) {
  const std::string cmd = std::string(PRIVATEXR_CLI) + " " + args + " 2>/dev/null";
  FILE* p = popen(cmd.c_str(), "r");
  std::string out;
  std::array<char, 512> buf{};
  while (fgets(buf.data(), buf.size(), p)) out += buf.data();
  const int status = pclose(p);
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, out};
}

TEST(Cli, AccountPrintsEpsilon) {
  const auto r = cli("account --q 0.02 --sigma 1.3 --steps 500 --delta 1e-5");
  ASSERT_EQ(r.code, 0);
  const auto j = nlohmann::json::parse(r.out);
  EXPECT_NEAR(j["epsilon"].get<double>(), 2.26353179335362635, 1e-6);
}

TEST(Cli, SolveSigmaRoundTrips) {
  const auto r = cli("account --q 0.02 --steps 500 --epsilon 1 --solve-sigma");
  ASSERT_EQ(r.code, 0);
  const auto j = nlohmann::json::parse(r.out);
  EXPECT_LE(j["epsilon"].get<double>(), 1.0);
  EXPECT_GE(j["epsilon"].get<double>(), 0.999);
}

TEST(Cli, UsageErrorsExitTwo) {
  EXPECT_EQ(cli("").code, 2);
  EXPECT_EQ(cli("account --q nope").code, 2);
  EXPECT_EQ(cli("--config /nonexistent/cfg.json account --q 0.1 --sigma 1 --steps 1").code, 2);
}

TEST(Cli, RuntimeErrorsExitOne) {
  const auto bad = std::filesystem::temp_directory_path() / "privatexr_cli_bad.csv";
  std::ofstream(bad) << "not,a,dataset\n1,2\n";
  EXPECT_EQ(cli("train --data " + bad.string() + " --out /dev/null").code, 1);
  std::filesystem::remove(bad);
}

TEST(Cli, HelpExitsZero) { EXPECT_EQ(cli("--help").code, 0); }

}  // namespace

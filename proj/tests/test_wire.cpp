#include <gtest/gtest.h>

#include "dmssd/wire.hpp"

using namespace dmssd;
using namespace dmssd::wire;

namespace {

Message random_message(Rng& rng) {
  switch (rng.below_int(4)) {
    case 0:
      return StateMessage{kProtocolVersion, static_cast<std::uint32_t>(rng.next_u64()), rng.next_u64(),
                          static_cast<std::int32_t>(rng.next_u64()), static_cast<std::int32_t>(rng.next_u64())};
    case 1:
      return GetModel{};
    case 2:
      return GetModel{rng.next_u64()};
    default:
      return ModelHeader{1 + rng.below(1000), rng.next_u64(), static_cast<std::uint32_t>(rng.next_u64())};
  }
}

}  // namespace

TEST(Wire, EncodesDocumentedLines) {
  EXPECT_EQ(encode(StateMessage{1, 2, 30, 4, 5}), "STATE 1 2 30 4 5\n");
  EXPECT_EQ(encode(GetModel{}), "GET MODEL\n");
  EXPECT_EQ(encode(GetModel{7}), "GET MODEL 7\n");
  EXPECT_EQ(encode(ModelHeader{3, 1024, 4294967295u}), "MODEL 3 1024 4294967295\n");
}

TEST(Wire, FuzzedRoundTripIsIdentity) {
  Rng rng(1);
  for (int i = 0; i < 10000; ++i) {
    const Message m = random_message(rng);
    const std::string line = encode(m);
    ASSERT_EQ(decode(line), m) << line;
    ASSERT_EQ(decode(std::string_view(line).substr(0, line.size() - 1)), m);
  }
}

TEST(Wire, RejectsMalformedLines) {
  for (const char* bad : {"", "\n", "STATE 1 2 3 4\n", "STATE 1 2 3 4 5 6\n", "STATE 2 0 0 0 0\n",
                          "STATE 1 02 3 4 5\n", "STATE 1  2 3 4 5\n", " STATE 1 2 3 4 5\n", "STATE 1 2 3 4 5 \n",
                          "STATE 1 2 -3 4 5\n", "STATE 1 2 3 4 x\n", "STATE 1 2 3 4 99999999999\n", "GET\n",
                          "GET MODELS\n", "GET MODEL 1 2\n", "MODEL 0 1 2\n", "MODEL 1 2\n", "MODEL 1 2 4294967296\n",
                          "HELLO\n", "STATE 1 2 3 4 5\nSTATE 1 2 3 4 5\n", "state 1 2 3 4 5\n"}) {
    EXPECT_THROW(decode(bad), FormatError) << '"' << bad << '"';
  }
  EXPECT_EQ(decode("STATE 1 0 0 -4 0\n"), (Message{StateMessage{1, 0, 0, -4, 0}}));
}

TEST(Wire, RandomBytesNeverCrash) {
  Rng rng(2);
  const std::string alphabet = "STAEGMODL0123456789 -\n";
  int accepted = 0;
  for (int i = 0; i < 10000; ++i) {
    std::string s;
    const int len = rng.below_int(24);
    for (int k = 0; k < len; ++k) s += alphabet[rng.below(alphabet.size())];
    try {
      const Message m = decode(s);
      ++accepted;
      EXPECT_EQ(decode(encode(m)), m);
    } catch (const FormatError&) {
    }
  }
  EXPECT_LT(accepted, 10000);
}

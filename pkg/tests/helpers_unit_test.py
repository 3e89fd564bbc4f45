import unittest, sys, os

# Get the parent directory
parent_dir = os.path.dirname(os.path.dirname(os.path.realpath(__file__)))

# Add the parent directory to sys.path
sys.path.append(parent_dir)

from modules.errors import MalformedEncoding
from modules.helpers import *


class TestBase64(unittest.TestCase):
    def test_padded_length(self):
        for n in range(0, 40):
            self.assertEqual(b64_len(n), len(b64_encode(b"x" * n)))

    def test_strict_decoding(self):
        with self.assertRaises(MalformedEncoding):
            b64_decode(b"not base64!")

    def test_padding_bits_must_be_zero(self):
        self.assertEqual(b64_encode(b"ab"), b"YWI=")
        for text in (b"YWJ=", b"YWJjZB==", b"YWJjZP=="):
            with self.assertRaises(MalformedEncoding):
                b64_decode(text)
        self.assertEqual(b64_decode(b"YWJjZA=="), b"abcd")

    def test_trailing_newline_is_tolerated(self):
        self.assertEqual(b64_decode(b64_encode(b"abc") + b"\n"), b"abc")


class TestReader(unittest.TestCase):
    def test_fields_in_order(self):
        data = pack_u8(7) + pack_u16(513) + pack_u32(70000) + pack_u64(2**40) + pack_blob(b"hey")
        reader = Reader(data)
        self.assertEqual(reader.u8(), 7)
        self.assertEqual(reader.u16(), 513)
        self.assertEqual(reader.u32(), 70000)
        self.assertEqual(reader.u64(), 2**40)
        self.assertEqual(reader.blob(), b"hey")
        reader.finish()

    def test_short_read(self):
        with self.assertRaises(MalformedEncoding):
            Reader(pack_u16(10) + b"abc").blob()

    def test_trailing_bytes(self):
        reader = Reader(b"\x01\x02")
        reader.u8()
        with self.assertRaises(MalformedEncoding):
            reader.finish()

    def test_items(self):
        data = pack_items([b"a", b"bc", b""])
        self.assertEqual(Reader(data).items(), [b"a", b"bc", b""])

    def test_oversized_blob(self):
        with self.assertRaises(MalformedEncoding):
            pack_blob(b"x" * 70000)


class TestSeeds(unittest.TestCase):
    def test_seeded_randfunc_repeats(self):
        self.assertEqual(seeded_randfunc(5)(64), seeded_randfunc(5)(64))
        self.assertNotEqual(seeded_randfunc(5)(64), seeded_randfunc(6)(64))

    def test_derive_seed_is_stable(self):
        self.assertEqual(derive_seed(1, "device", 3), derive_seed(1, "device", 3))
        self.assertNotEqual(derive_seed(1, "device", 3), derive_seed(1, "device", 4))

    def test_parse_seed_range(self):
        self.assertEqual(parse_seed_range("1..5"), [1, 2, 3, 4, 5])
        self.assertEqual(parse_seed_range("3, 7"), [3, 7])
        self.assertEqual(parse_seed_range("9"), [9])


if __name__ == "__main__":
    unittest.main()

import numpy as np
import pytest

from bufsecagg.prg import Seed
from bufsecagg.vault import (
    AccessDenied,
    Attribute,
    AttributeAuthority,
    AttributePublicKey,
    AuthorityRejected,
    CIPHERTEXT_BYTES,
    PublicParams,
    SealedSeed,
    attribute_public_key,
    decrypt,
    encrypt,
    keygen,
    setup,
)


@pytest.fixture(scope="module")
def system():
    pp, mk = setup()
    return pp, mk


def seal(pp, mk, seed, attr, origin=0, rng=None):
    return encrypt(pp, seed, attribute_public_key(mk, attr), origin, rng)


class TestSetup:
    def test_master_keys_are_fresh(self):
        _, mk1 = setup()
        _, mk2 = setup()
        assert mk1.secret != mk2.secret

    def test_public_params_round_trip(self):
        pp, _ = setup(aa_endpoint="tcp://127.0.0.1:9999")
        assert PublicParams.from_bytes(pp.to_bytes()) == pp

    def test_repr_hides_master_secret(self, system):
        _, mk = system
        assert mk.secret.hex() not in repr(mk)

    def test_end_to_end_composition(self, system):
        pp, mk = system
        attr = Attribute(round_id=3, slot=1)
        seed = Seed.fresh()
        assert decrypt(pp, seal(pp, mk, seed, attr), keygen(mk, attr)) == seed


class TestKeygen:
    def test_deterministic(self, system):
        _, mk = system
        a = Attribute(0, 1)
        assert keygen(mk, a) == keygen(mk, a)

    def test_round_separation(self, system):
        _, mk = system
        assert keygen(mk, Attribute(0, 1)) != keygen(mk, Attribute(1, 1))

    def test_slot_separation(self, system):
        _, mk = system
        assert keygen(mk, Attribute(0, 1)) != keygen(mk, Attribute(0, 2))

    def test_distinct_masters_never_collide(self):
        masters = [setup()[1] for _ in range(40)]
        attrs = [Attribute(r, s) for r in range(5) for s in range(5)]
        seen = set()
        for mk in masters:
            for attr in attrs:
                seen.add(keygen(mk, attr).secret)
        assert len(seen) == len(masters) * len(attrs)


class TestEncryptDecrypt:
    def test_round_trip(self, system):
        pp, mk = system
        attr = Attribute(7, 2)
        seed = Seed.fresh()
        sealed = seal(pp, mk, seed, attr, origin=1)
        assert decrypt(pp, sealed, keygen(mk, attr)) == seed

    def test_fresh_nonce_per_call(self, system):
        pp, mk = system
        attr = Attribute(0, 0)
        seed = Seed.fresh()
        a = seal(pp, mk, seed, attr)
        b = seal(pp, mk, seed, attr)
        assert a.nonce != b.nonce
        assert a.ciphertext != b.ciphertext

    def test_deterministic_with_seeded_rng(self, system):
        pp, mk = system
        attr = Attribute(0, 0)
        seed = Seed(bytes(32))
        a = seal(pp, mk, seed, attr, rng=np.random.default_rng(3))
        b = seal(pp, mk, seed, attr, rng=np.random.default_rng(3))
        assert a == b

    def test_ciphertext_length_constant(self, system):
        pp, mk = system
        lengths = {
            len(seal(pp, mk, Seed.fresh(), Attribute(r, s), origin=s).ciphertext)
            for r in (0, 1, 2**40)
            for s in (0, 3, 999)
        }
        assert lengths == {CIPHERTEXT_BYTES}

    def test_wrong_slot_denied(self, system):
        pp, mk = system
        sealed = seal(pp, mk, Seed.fresh(), Attribute(0, 1))
        with pytest.raises(AccessDenied):
            decrypt(pp, sealed, keygen(mk, Attribute(0, 2)))

    def test_previous_round_key_denied(self, system):
        # regenerating attributes each round is what retires old slot keys
        pp, mk = system
        sealed = seal(pp, mk, Seed.fresh(), Attribute(5, 1))
        with pytest.raises(AccessDenied):
            decrypt(pp, sealed, keygen(mk, Attribute(4, 1)))

    def test_other_authority_denied(self, system):
        pp, mk = system
        pp2, mk2 = setup()
        attr = Attribute(0, 1)
        sealed = seal(pp, mk, Seed.fresh(), attr)
        with pytest.raises(AccessDenied):
            decrypt(pp, sealed, keygen(mk2, attr))
        sealed2 = seal(pp2, mk2, Seed.fresh(), attr)
        with pytest.raises(AccessDenied):
            decrypt(pp2, sealed2, keygen(mk, attr))

    def test_tampering_any_field_denied(self, system):
        pp, mk = system
        attr = Attribute(2, 1)
        sk = keygen(mk, attr)
        sealed = seal(pp, mk, Seed.fresh(), attr, origin=0)

        ct = bytearray(sealed.ciphertext)
        ct[40] ^= 1
        with pytest.raises(AccessDenied):
            decrypt(pp, SealedSeed(attr, 0, sealed.nonce, bytes(ct)), sk)

        nonce = bytearray(sealed.nonce)
        nonce[0] ^= 1
        with pytest.raises(AccessDenied):
            decrypt(pp, SealedSeed(attr, 0, bytes(nonce), sealed.ciphertext), sk)

        with pytest.raises(AccessDenied):
            decrypt(pp, SealedSeed(attr, 3, sealed.nonce, sealed.ciphertext), sk)

        relabeled = SealedSeed(Attribute(2, 2), 0, sealed.nonce, sealed.ciphertext)
        with pytest.raises(AccessDenied):
            decrypt(pp, relabeled, keygen(mk, Attribute(2, 2)))

    def test_truncated_blob_denied(self, system):
        pp, mk = system
        attr = Attribute(0, 0)
        sealed = seal(pp, mk, Seed.fresh(), attr)
        broken = SealedSeed(attr, 0, sealed.nonce, sealed.ciphertext[:-1])
        with pytest.raises(AccessDenied):
            decrypt(pp, broken, keygen(mk, attr))


class TestSealedSeedWire:
    def test_round_trip(self, system):
        pp, mk = system
        sealed = seal(pp, mk, Seed.fresh(), Attribute(3, 9), origin=4)
        data = sealed.to_bytes()
        parsed, consumed = SealedSeed.from_bytes(data)
        assert parsed == sealed
        assert consumed == len(data)

    def test_layout(self, system):
        pp, mk = system
        sealed = seal(pp, mk, Seed.fresh(), Attribute(0x0102, 7), origin=5)
        data = sealed.to_bytes()
        assert data[:8] == (0x0102).to_bytes(8, "big")
        assert data[8:12] == (7).to_bytes(4, "big")
        assert data[12:16] == (5).to_bytes(4, "big")
        assert data[16:28] == sealed.nonce
        assert data[28:32] == len(sealed.ciphertext).to_bytes(4, "big")

    def test_concatenated_parse(self, system):
        pp, mk = system
        seals = [seal(pp, mk, Seed.fresh(), Attribute(0, s)) for s in range(4)]
        blob = b"".join(s.to_bytes() for s in seals)
        offset = 0
        for expected in seals:
            parsed, offset = SealedSeed.from_bytes(blob, offset)
            assert parsed == expected
        assert offset == len(blob)


class TestAuthority:
    def test_issues_key_to_registered_token(self):
        aa = AttributeAuthority()
        aa.begin_round(0)
        attr = Attribute(0, 2)
        aa.register_grant(attr, b"tok-aaaaaaaaaaaa")
        sk = aa.issue_key(attr, b"tok-aaaaaaaaaaaa")
        assert sk.attribute == attr

    def test_rejects_other_requester(self):
        aa = AttributeAuthority()
        aa.begin_round(0)
        attr = Attribute(0, 0)
        aa.register_grant(attr, b"tok-one-00000000")
        with pytest.raises(AuthorityRejected):
            aa.issue_key(attr, b"tok-two-00000000")

    def test_same_holder_can_retry(self):
        aa = AttributeAuthority()
        aa.begin_round(0)
        attr = Attribute(0, 0)
        aa.register_grant(attr, b"tok-one-00000000")
        first = aa.issue_key(attr, b"tok-one-00000000")
        assert aa.issue_key(attr, b"tok-one-00000000") == first

    def test_regrant_strands_old_token(self):
        # timeout path: the replacement user gets the slot, the ghost does not
        aa = AttributeAuthority()
        aa.begin_round(0)
        attr = Attribute(0, 1)
        aa.register_grant(attr, b"ghost-token-0000")
        aa.issue_key(attr, b"ghost-token-0000")
        aa.register_grant(attr, b"fresh-token-0000")
        sk = aa.issue_key(attr, b"fresh-token-0000")
        assert sk.attribute == attr
        with pytest.raises(AuthorityRejected):
            aa.issue_key(attr, b"ghost-token-0000")

    def test_stale_round_rejected(self):
        aa = AttributeAuthority()
        aa.begin_round(1)
        old = Attribute(0, 0)
        with pytest.raises(AuthorityRejected):
            aa.register_grant(old, b"tok-000000000000")
        with pytest.raises(AuthorityRejected):
            aa.issue_key(old, b"tok-000000000000")
        with pytest.raises(AuthorityRejected):
            aa.round_attribute_keys(0, 4)

    def test_round_rollback_rejected(self):
        aa = AttributeAuthority()
        aa.begin_round(2)
        with pytest.raises(AuthorityRejected):
            aa.begin_round(1)

    def test_claims_cleared_on_new_round(self):
        aa = AttributeAuthority()
        aa.begin_round(0)
        aa.register_grant(Attribute(0, 0), b"tok-000000000000")
        aa.begin_round(1)
        with pytest.raises(AuthorityRejected):
            aa.issue_key(Attribute(1, 0), b"tok-000000000000")

    def test_public_keys_match_keygen(self):
        pp, mk = setup()
        aa = AttributeAuthority(pp, mk)
        aa.begin_round(4)
        keys = aa.round_attribute_keys(4, 3)
        assert [k.attribute.slot for k in keys] == [0, 1, 2]
        for k in keys:
            assert isinstance(k, AttributePublicKey)
            assert k == attribute_public_key(mk, k.attribute)


class TestRandomizedSoundness:
    # module-scale spot checks; the acceptance suite runs the 10^4 versions
    def test_mismatched_attributes_never_open(self, system):
        pp, mk = system
        rng = np.random.default_rng(11)
        for _ in range(500):
            r1, s1 = int(rng.integers(0, 50)), int(rng.integers(0, 20))
            r2, s2 = int(rng.integers(0, 50)), int(rng.integers(0, 20))
            if (r1, s1) == (r2, s2):
                s2 += 1
            sealed = seal(pp, mk, Seed.fresh(rng), Attribute(r1, s1))
            with pytest.raises(AccessDenied):
                decrypt(pp, sealed, keygen(mk, Attribute(r2, s2)))

    def test_matched_attributes_always_open(self, system):
        pp, mk = system
        rng = np.random.default_rng(12)
        for _ in range(500):
            attr = Attribute(int(rng.integers(0, 1 << 40)), int(rng.integers(0, 1 << 16)))
            seed = Seed.fresh(rng)
            assert decrypt(pp, seal(pp, mk, seed, attr, rng=rng), keygen(mk, attr)) == seed

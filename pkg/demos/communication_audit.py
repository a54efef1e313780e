"""What crosses the wire per batch.

Smashed-data size for each architecture preset, before and after swapping
the client head for one that upsamples back to the input shape.  The
``measured`` column comes from running an actual client forward pass and
counting the payload bytes; ``ratio`` is plain shape arithmetic.

    python demos/communication_audit.py
"""

from sldp import experiments as ex

rows = ex.run_comm_audit(ex.make_config())
print(f"{'arch':15s} {'upsampled':>9s} {'smashed':>10s} {'ratio':>7s} {'measured':>9s} {'KiB/batch':>10s}")
for r in rows:
    print(f"{r['arch']:15s} {str(r['upsampled']):>9s} {r['smashed_shape']:>10s} {r['ratio']:7.3f} "
          f"{r['measured_ratio']:9.3f} {r['bytes_per_batch'] / 1024:10.1f}")
vgg = next(r for r in rows if r["arch"] == "vgg11-lite" and not r["upsampled"])
print(f"\npublished VGG-11 figure for comparison: smashed {vgg['quoted_smashed_shape']}, "
      f"{vgg['quoted_ratio']}x saving")

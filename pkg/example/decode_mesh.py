from fei3d import decode_mesh, export_obj, logger, RngState
from fei3d.morphviz import make_toy_asset, save_asset

# 随机生成一个小的可变形模型: 50 个顶点、10 个形状基、5 个表情基
asset = make_toy_asset(50, 10, 5, RngState(0))
save_asset(asset, "toy_asset.bin")

# 参数向量较短时末尾补零
mesh = decode_mesh(asset, shape_params=[0.5, -0.2], expr_params=[1.0, 0.0, 0.3])
export_obj(mesh, "face.obj")
logger.info(f"{mesh.vertices.shape[0]} vertices, {mesh.triangles.shape[0]} triangles")

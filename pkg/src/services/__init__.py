# Services package for the layered porous-medium convection simulator
